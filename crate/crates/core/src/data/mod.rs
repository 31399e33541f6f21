//! Record ingestion, preprocessing, splitting and the synthetic generator.
//!
//! On-disk input is a directory of `<id>.csv` files (12 numeric columns in
//! lead order I, II, III, aVR, aVL, aVF, V1..V6, one row per sample, an
//! optional header row with exactly those names) plus a `REFERENCE.csv` with
//! columns `Recording,First_label,Second_label,Third_label`. Labels in the
//! reference file are the 1-based class numbers 1..9; empty cells are absent.

mod ingest;
mod pack;
mod split;
mod synth;

use rand::Rng;

pub use ingest::{load_dataset, read_record, read_reference};
pub use pack::{read_pack, write_pack, PackedDataset, PACK_MAGIC};
pub use split::{single_label, split_and_balance, DatasetSplit, TEST_PER_CLASS, VAL_PER_CLASS};
pub use synth::{synth_dataset, synth_records, template, SynthConfig, SynthLayout, SYNTH_CHANNELS};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::MaskedBatch;

pub const LEAD_NAMES: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// Leads I, II and V1..V6; III, aVR, aVL and aVF are linear combinations of I and II.
pub const KEPT_LEADS: [usize; 8] = [0, 1, 6, 7, 8, 9, 10, 11];

pub const CLASS_NAMES: [&str; 9] = [
    "Normal", "AF", "I-AVB", "LBBB", "RBBB", "PAC", "PVC", "STD", "STE",
];

pub const SAMPLE_RATE: usize = 500;

pub const TARGET_LENGTH: usize = 33792;

/// A raw 12-lead recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    /// `[12, L]`
    pub leads: Tensor,
    pub sample_rate: usize,
    /// 0-based class indices, first label first.
    pub labels: Vec<usize>,
}

/// A single-label record after lead selection, scaling and truncation; the
/// valid span only, not yet placed in a fixed-length window.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    pub id: String,
    /// `[C, valid_len]`
    pub signal: Tensor,
    pub label: usize,
}

impl PreparedRecord {
    pub fn channels(&self) -> usize {
        self.signal.shape()[0]
    }

    pub fn valid_len(&self) -> usize {
        self.signal.shape()[1]
    }

    /// Signal `[C, len]` with the valid span starting at `offset`, and its mask `[len]`.
    pub fn place(&self, len: usize, offset: usize) -> Result<(Tensor, Tensor)> {
        let (c, valid) = (self.channels(), self.valid_len());
        if offset + valid > len {
            return Err(Error::param(format!(
                "record {} ({valid} samples) does not fit at offset {offset} in {len}",
                self.id
            )));
        }
        let mut sig = vec![0.0; c * len];
        for ch in 0..c {
            sig[ch * len + offset..][..valid]
                .copy_from_slice(&self.signal.data()[ch * valid..][..valid]);
        }
        let mut mask = vec![0.0; len];
        mask[offset..offset + valid].fill(1.0);
        Ok((Tensor::new(&[c, len], sig)?, Tensor::new(&[len], mask)?))
    }

    /// Uniform offset in `0..=len - valid_len`.
    pub fn random_offset(&self, len: usize, rng: &mut impl Rng) -> usize {
        rng.gen_range(0..=len.saturating_sub(self.valid_len()))
    }
}

/// Keep leads I, II, V1..V6, divide each by its max absolute value (1 for an
/// all-zero lead) and drop samples beyond `target_len`.
pub fn prepare(record: &EcgRecord, target_len: usize) -> Result<PreparedRecord> {
    if record.labels.len() != 1 {
        return Err(Error::Input(format!(
            "record {} has {} labels; only single-label records can be prepared",
            record.id,
            record.labels.len()
        )));
    }
    let s = record.leads.shape();
    if s.len() != 2 || s[0] != LEAD_NAMES.len() {
        return Err(Error::Input(format!(
            "record {} is not 12-lead: {s:?}",
            record.id
        )));
    }
    let l = s[1];
    let valid = l.min(target_len);
    let mut out = Vec::with_capacity(KEPT_LEADS.len() * valid);
    for &lead in &KEPT_LEADS {
        let row = &record.leads.data()[lead * l..][..l];
        let peak = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { peak } else { 1.0 };
        out.extend(row[..valid].iter().map(|v| v / scale));
    }
    Ok(PreparedRecord {
        id: record.id.clone(),
        signal: Tensor::new(&[KEPT_LEADS.len(), valid], out)?,
        label: record.labels[0],
    })
}

/// [`prepare`] followed by placement at a uniformly random offset.
pub fn preprocess(
    record: &EcgRecord,
    target_len: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let p = prepare(record, target_len)?;
    let offset = p.random_offset(target_len, rng);
    p.place(target_len, offset)
}

/// Stack placed records into a batch.
pub fn assemble(records: &[&PreparedRecord], offsets: &[usize], len: usize) -> Result<MaskedBatch> {
    let mut sig = Vec::with_capacity(records.len());
    let mut mask = Vec::with_capacity(records.len());
    for (r, &o) in records.iter().zip(offsets) {
        let (s, m) = r.place(len, o)?;
        sig.push(s);
        mask.push(m);
    }
    MaskedBatch::new(
        Tensor::stack(&sig)?,
        Tensor::stack(&mask)?,
        records.iter().map(|r| r.label).collect(),
    )
}

/// Batch with offsets drawn once from `seed`, for stable evaluation.
pub fn fixed_batch(records: &[PreparedRecord], len: usize, seed: u64) -> Result<MaskedBatch> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<usize> = records
        .iter()
        .map(|r| r.random_offset(len, &mut rng))
        .collect();
    let refs: Vec<&PreparedRecord> = records.iter().collect();
    assemble(&refs, &offsets, len)
}
