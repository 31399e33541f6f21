//! Synthetic desk-scale dataset.
//!
//! Every record is uniform baseline noise on 8 channels plus bumps at random
//! non-overlapping positions inside a valid span whose length is drawn from
//! `[length / 2, length]`. Template `k` is a Hann-windowed sine with `k`
//! half-cycles. Two layouts:
//!
//! * [`SynthLayout::Count`]: class `c` carries `c` bumps, one each of
//!   templates `1..=c` in random order, so class 0 is pure noise.
//! * [`SynthLayout::Shape`]: class `c` carries `bumps` copies of template
//!   `c + 1`, so the classes differ only in bump shape.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PreparedRecord;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const SYNTH_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthLayout {
    #[default]
    Count,
    Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub length: usize,
    pub n_classes: usize,
    /// Half-width of the uniform baseline noise.
    pub noise: f64,
    /// Peak bump amplitude.
    pub amplitude: f64,
    /// Bump width in samples.
    pub width: usize,
    pub layout: SynthLayout,
    /// Bumps per record in the shape layout.
    pub bumps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 255,
            length: 2048,
            n_classes: 3,
            noise: 0.1,
            amplitude: 1.0,
            width: 64,
            layout: SynthLayout::Count,
            bumps: 6,
        }
    }
}

impl SynthConfig {
    /// Largest number of bumps in one record.
    pub fn max_bumps(&self) -> usize {
        match self.layout {
            SynthLayout::Count => self.n_classes.saturating_sub(1),
            SynthLayout::Shape => self.bumps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 64 {
            return Err(Error::param(format!(
                "synthetic length must be ≥ 64, got {}",
                self.length
            )));
        }
        if self.n_classes == 0 || self.n_per_class == 0 {
            return Err(Error::param(
                "synthetic dataset needs at least one class and one record per class",
            ));
        }
        if self.layout == SynthLayout::Shape && self.bumps == 0 {
            return Err(Error::param(
                "the shape layout needs at least one bump per record",
            ));
        }
        if self.width == 0 || self.max_bumps() * self.width > self.length / 2 {
            return Err(Error::param(format!(
                "{} bumps of width {} do not fit in {} samples",
                self.max_bumps(),
                self.width,
                self.length / 2
            )));
        }
        if !(self.noise >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::param("noise must be ≥ 0 and amplitude finite"));
        }
        Ok(())
    }
}

/// Template `k ≥ 1` sampled at `width` points.
pub fn template(k: usize, width: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let raw: Vec<f64> = (0..width)
        .map(|t| {
            let u = (t as f64 + 0.5) / width as f64;
            (PI * u).sin().powi(2) * (PI * k as f64 * u).sin()
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    raw.into_iter().map(|v| v / peak).collect()
}

/// Records from a [`SynthConfig`]; bump start positions of each record are
/// returned alongside for inspection.
pub fn synth_records(cfg: &SynthConfig, seed: u64) -> Result<Vec<(PreparedRecord, Vec<usize>)>> {
    cfg.validate()?;
    let templates: Vec<Vec<f64>> = (1..=cfg.n_classes)
        .map(|k| template(k, cfg.width))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.n_classes * cfg.n_per_class);
    for c in 0..cfg.n_classes {
        for i in 0..cfg.n_per_class {
            let valid = rng.gen_range(cfg.length / 2..=cfg.length);
            let mut data: Vec<f64> = (0..SYNTH_CHANNELS * valid)
                .map(|_| rng.gen_range(-cfg.noise..=cfg.noise))
                .collect();
            let shapes: Vec<usize> = match cfg.layout {
                SynthLayout::Count => {
                    let mut order: Vec<usize> = (0..c).collect();
                    order.shuffle(&mut rng);
                    order
                }
                SynthLayout::Shape => vec![c; cfg.bumps],
            };
            let free = valid - shapes.len() * cfg.width;
            let mut starts: Vec<usize> =
                (0..shapes.len()).map(|_| rng.gen_range(0..=free)).collect();
            starts.sort_unstable();
            for (j, s) in starts.iter_mut().enumerate() {
                *s += j * cfg.width;
            }
            for (&s, &k) in starts.iter().zip(&shapes) {
                for ch in 0..SYNTH_CHANNELS {
                    let row = &mut data[ch * valid + s..][..cfg.width];
                    for (v, t) in row.iter_mut().zip(&templates[k]) {
                        *v += cfg.amplitude * t;
                    }
                }
            }
            out.push((
                PreparedRecord {
                    id: format!("S{c}_{i:05}"),
                    signal: Tensor::new(&[SYNTH_CHANNELS, valid], data)?,
                    label: c,
                },
                starts,
            ));
        }
    }
    Ok(out)
}

/// `n_per_class` records of each class in the count layout with the default
/// noise; the bump width shrinks below 64 when the bumps would not fit.
pub fn synth_dataset(
    n_per_class: usize,
    length: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<PreparedRecord>> {
    let cfg = SynthConfig {
        n_per_class,
        length,
        n_classes,
        width: SynthConfig::default()
            .width
            .min(length / (2 * n_classes.max(2) - 2)),
        ..SynthConfig::default()
    };
    Ok(synth_records(&cfg, seed)?
        .into_iter()
        .map(|(r, _)| r)
        .collect())
}
