use std::fs::File;
use std::path::Path;

use super::{EcgRecord, CLASS_NAMES, LEAD_NAMES, SAMPLE_RATE};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// `(id, 0-based labels)` rows of a reference file, sorted by id.
pub fn read_reference(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::data(path, format!("line {line}: {e}")))?;
        let id = row.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::data(path, format!("line {line}: empty record id")));
        }
        if row.len() > 4 {
            return Err(Error::data(
                path,
                format!("line {line}: more than three labels"),
            ));
        }
        let mut labels = Vec::new();
        for cell in row.iter().skip(1).filter(|c| !c.is_empty()) {
            let v: usize = cell.parse().map_err(|_| {
                Error::data(
                    path,
                    format!("line {line}: label {cell:?} is not an integer"),
                )
            })?;
            if !(1..=CLASS_NAMES.len()).contains(&v) {
                return Err(Error::data(
                    path,
                    format!("line {line}: label {v} outside 1..=9"),
                ));
            }
            labels.push(v - 1);
        }
        if labels.is_empty() {
            return Err(Error::data(
                path,
                format!("line {line}: record {id} has no label"),
            ));
        }
        rows.push((id, labels));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(rows)
}

/// One `<id>.csv` as `[12, L]`.
pub fn read_record(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); LEAD_NAMES.len()];
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        if i == 0 && row.iter().eq(LEAD_NAMES.iter().copied()) {
            continue;
        }
        if row.len() != LEAD_NAMES.len() {
            return Err(Error::data(
                path,
                format!("line {}: expected 12 columns, found {}", i + 1, row.len()),
            ));
        }
        for (col, cell) in columns.iter_mut().zip(row.iter()) {
            let v: f64 = cell.parse().map_err(|_| {
                Error::data(path, format!("line {}: {cell:?} is not a number", i + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::data(
                    path,
                    format!("line {}: non-finite value", i + 1),
                ));
            }
            col.push(v);
        }
    }
    let l = columns[0].len();
    if l == 0 {
        return Err(Error::data(path, "no samples"));
    }
    Tensor::new(&[LEAD_NAMES.len(), l], columns.concat())
}

/// Every record listed in `reference_csv`, read from `signal_dir/<id>.csv`, in id order.
pub fn load_dataset(signal_dir: &Path, reference_csv: &Path) -> Result<Vec<EcgRecord>> {
    read_reference(reference_csv)?
        .into_iter()
        .map(|(id, labels)| {
            let leads = read_record(&signal_dir.join(format!("{id}.csv")))?;
            Ok(EcgRecord {
                id,
                leads,
                sample_rate: SAMPLE_RATE,
                labels,
            })
        })
        .collect()
}
