use crate::error::{Error, Result};

fn check(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Input("no predictions to score".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `[actual][predicted]` counts.
pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    check(preds, labels)?;
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::Input(format!(
                "class index out of range for {n_classes} classes"
            )));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Per-class F1 `2tp / (2tp + fp + fn)`; `None` for classes that never occur
/// in either the labels or the predictions.
pub fn per_class_f1(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<Option<f64>>> {
    let m = confusion(preds, labels, n_classes)?;
    Ok((0..n_classes)
        .map(|c| {
            let tp = m[c][c];
            let fn_ = m[c].iter().sum::<usize>() - tp;
            let fp = (0..n_classes).map(|r| m[r][c]).sum::<usize>() - tp;
            let denom = 2 * tp + fp + fn_;
            (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
        })
        .collect())
}

/// Unweighted mean of per-class F1 over the classes that occur.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let f1: Vec<f64> = per_class_f1(preds, labels, n_classes)?
        .into_iter()
        .flatten()
        .collect();
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}
