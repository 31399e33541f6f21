//! Metrics, noise sweeps and report emission.

mod metrics;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metrics::{accuracy, confusion, macro_f1, per_class_f1};
pub use report::{emit_report, parse_report_csv, report_csv, report_svg, signal_svg};

use crate::attacks::{pgd_attack, uniform_noise, AttackConfig};
use crate::autograd::Tensor;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Classifier, MaskedBatch};

/// PGD levels of the robustness table.
pub const PGD_LEVELS: [f64; 9] = [0.0, 0.001, 0.003, 0.005, 0.007, 0.01, 0.03, 0.05, 0.1];

/// White-noise levels, up to 0.6.
pub const WHITE_LEVELS: [f64; 9] = [0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Pgd,
    White,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Pgd => "pgd",
            NoiseKind::White => "white",
        }
    }

    pub fn default_levels(self) -> &'static [f64] {
        match self {
            NoiseKind::Pgd => &PGD_LEVELS,
            NoiseKind::White => &WHITE_LEVELS,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(NoiseKind::Pgd),
            "white" => Ok(NoiseKind::White),
            _ => Err(Error::param(format!(
                "unknown noise kind {s:?}; expected pgd or white"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub noise_level: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub method: String,
    pub kind: NoiseKind,
    pub rows: Vec<SweepRow>,
    pub seed: u64,
    /// Template the per-level attacks were derived from.
    pub attack: AttackConfig,
    /// White-noise draws averaged per level.
    pub repeats: usize,
    pub model_checksum: String,
}

impl SweepReport {
    pub fn validate(&self) -> Result<()> {
        check_levels(&self.rows.iter().map(|r| r.noise_level).collect::<Vec<_>>())?;
        for r in &self.rows {
            if !(0.0..=1.0).contains(&r.accuracy) || !(0.0..=1.0).contains(&r.macro_f1) {
                return Err(Error::Input(format!(
                    "row at level {} is outside [0, 1]",
                    r.noise_level
                )));
            }
        }
        if self.method.is_empty() || self.method.contains(['/', '\\']) {
            return Err(Error::Input(format!(
                "unusable method label {:?}",
                self.method
            )));
        }
        Ok(())
    }

    pub fn row(&self, level: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.noise_level == level)
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.first() != Some(&0.0) {
        return Err(Error::param("noise levels must start at 0"));
    }
    if levels.windows(2).any(|w| !(w[1] > w[0])) || levels.iter().any(|l| !l.is_finite()) {
        return Err(Error::param(format!(
            "noise levels must be finite and strictly increasing: {levels:?}"
        )));
    }
    Ok(())
}

/// Predictions in chunks of at most `chunk` samples.
pub fn predict_chunked<C: Classifier + ?Sized>(
    net: &C,
    batch: &MaskedBatch,
    chunk: usize,
) -> Result<Vec<usize>> {
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(batch.len());
    let mut start = 0;
    while start < batch.len() {
        let end = (start + chunk).min(batch.len());
        out.extend(argmax_rows(&net.logits(&batch.slice(start, end)?)?));
        start = end;
    }
    Ok(out)
}

/// Perturbed signals of `batch` at `level`, processed `chunk` samples at a time.
pub fn perturb<C: Classifier + ?Sized>(
    net: &C,
    batch: &MaskedBatch,
    kind: NoiseKind,
    level: f64,
    template: &AttackConfig,
    seed: u64,
    chunk: usize,
) -> Result<Tensor> {
    if level == 0.0 {
        return Ok(batch.signals.clone());
    }
    let chunk = chunk.max(1);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < batch.len() {
        let end = (start + chunk).min(batch.len());
        let part = batch.slice(start, end)?;
        let s = derive_seed(seed, &[&start.to_string()]);
        let x = match kind {
            NoiseKind::Pgd => {
                let cfg = AttackConfig {
                    epsilon: level,
                    seed: s,
                    ..template.clone()
                };
                pgd_attack(net, &part, &cfg)?
            }
            NoiseKind::White => uniform_noise(&part, level, template.perturb_padding, s)?,
        };
        parts.push(x);
        start = end;
    }
    concat_first(&parts)
}

fn concat_first(parts: &[Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(
        &shape,
        parts
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect(),
    )
}

/// Options for [`noise_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub kind: NoiseKind,
    pub levels: Vec<f64>,
    pub attack: AttackConfig,
    pub seed: u64,
    /// White-noise draws per level; PGD always uses one.
    pub repeats: usize,
    /// Samples per attack/prediction chunk.
    pub chunk: usize,
    pub method: String,
}

impl SweepOptions {
    pub fn new(kind: NoiseKind, method: &str, seed: u64) -> Self {
        Self {
            kind,
            levels: kind.default_levels().to_vec(),
            attack: AttackConfig::default(),
            seed,
            repeats: 1,
            chunk: 64,
            method: method.to_string(),
        }
    }
}

/// Accuracy and macro F1 of a frozen net on `test` at every noise level.
pub fn noise_sweep<C: Classifier + ?Sized>(
    net: &C,
    test: &MaskedBatch,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    noise_sweep_with(net, test, opts, |_| {})
}

/// As [`noise_sweep`], calling `on_row` after each level.
pub fn noise_sweep_with<C: Classifier + ?Sized>(
    net: &C,
    test: &MaskedBatch,
    opts: &SweepOptions,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<SweepReport> {
    check_levels(&opts.levels)?;
    opts.attack.validate()?;
    if opts.repeats == 0 {
        return Err(Error::param("repeats must be ≥ 1"));
    }
    let k = net.num_classes();
    let draws = match opts.kind {
        NoiseKind::Pgd => 1,
        NoiseKind::White => opts.repeats,
    };
    let mut rows = Vec::with_capacity(opts.levels.len());
    for &level in &opts.levels {
        let (mut acc, mut f1) = (0.0, 0.0);
        let n_draws = if level == 0.0 { 1 } else { draws };
        for d in 0..n_draws {
            let seed = derive_seed(
                opts.seed,
                &[
                    &opts.method,
                    opts.kind.name(),
                    &level.to_string(),
                    &d.to_string(),
                ],
            );
            let x = perturb(net, test, opts.kind, level, &opts.attack, seed, opts.chunk)?;
            let preds = predict_chunked(net, &test.with_signals(x)?, opts.chunk)?;
            acc += accuracy(&preds, &test.labels)?;
            f1 += macro_f1(&preds, &test.labels, k)?;
        }
        let row = SweepRow {
            noise_level: level,
            accuracy: acc / n_draws as f64,
            macro_f1: f1 / n_draws as f64,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(SweepReport {
        method: opts.method.clone(),
        kind: opts.kind,
        rows,
        seed: opts.seed,
        attack: opts.attack.clone(),
        repeats: draws,
        model_checksum: net.checksum(),
    })
}
