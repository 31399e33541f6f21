use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EcgRecord, PreparedRecord, CLASS_NAMES};
use crate::error::{Error, Result};

pub const VAL_PER_CLASS: usize = 5;
pub const TEST_PER_CLASS: usize = 50;

/// Train/val/test partition with a fixed upsampling of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub n_classes: usize,
    /// Unique training records.
    pub train: Vec<PreparedRecord>,
    /// Indices into `train` forming the class-balanced training set; every
    /// unique record appears at least once.
    pub upsample: Vec<usize>,
    pub val: Vec<PreparedRecord>,
    pub test: Vec<PreparedRecord>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn balanced_train(&self) -> Vec<&PreparedRecord> {
        self.upsample.iter().map(|&i| &self.train[i]).collect()
    }

    pub fn class_counts(records: &[&PreparedRecord], n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for r in records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.upsample.iter().any(|&i| i >= self.train.len()) {
            return Err(Error::Input("upsampling index out of range".into()));
        }
        for r in self.train.iter().chain(&self.val).chain(&self.test) {
            if r.label >= self.n_classes {
                return Err(Error::Input(format!(
                    "record {} has label {} ≥ {}",
                    r.id, r.label, self.n_classes
                )));
            }
        }
        Ok(())
    }
}

/// Drop multi-label records; returns the kept records and the number removed.
pub fn single_label(records: Vec<EcgRecord>) -> (Vec<EcgRecord>, usize) {
    let before = records.len();
    let kept: Vec<EcgRecord> = records
        .into_iter()
        .filter(|r| r.labels.len() == 1)
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

fn class_name(c: usize) -> String {
    CLASS_NAMES
        .get(c)
        .map_or_else(|| format!("class {c}"), |n| format!("{n} (class {c})"))
}

/// Per class, a seeded draw of 5 validation and 50 test records; the rest
/// train, upsampled with replacement to the largest class count.
pub fn split_and_balance(
    mut records: Vec<PreparedRecord>,
    n_classes: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    records.sort_by(|a, b| a.id.cmp(&b.id));
    if records.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Input("duplicate record ids".into()));
    }
    let mut by_class: Vec<Vec<PreparedRecord>> = vec![Vec::new(); n_classes];
    for r in records {
        if r.label >= n_classes {
            return Err(Error::Input(format!(
                "record {} has label {} ≥ {n_classes}",
                r.id, r.label
            )));
        }
        by_class[r.label].push(r);
    }
    let need = VAL_PER_CLASS + TEST_PER_CLASS;
    for (c, rs) in by_class.iter().enumerate() {
        if rs.len() < need {
            return Err(Error::Input(format!(
                "{} has {} records; at least {need} are needed",
                class_name(c),
                rs.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut class_ranges = Vec::with_capacity(n_classes);
    for mut rs in by_class {
        rs.shuffle(&mut rng);
        let rest = rs.split_off(need);
        let t = rs.split_off(VAL_PER_CLASS);
        val.extend(rs);
        test.extend(t);
        let start = train.len();
        train.extend(rest);
        class_ranges.push(start..train.len());
    }

    let largest = class_ranges.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut upsample = Vec::with_capacity(largest * n_classes);
    for range in class_ranges {
        upsample.extend(range.clone());
        for _ in range.len()..largest {
            upsample.push(rng.gen_range(range.clone()));
        }
    }

    Ok(DatasetSplit {
        n_classes,
        train,
        upsample,
        val,
        test,
        split_seed: seed,
    })
}
