use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Fixed-length signals with a validity mask per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// `[N, C, L]`
    pub signals: Tensor,
    /// `[N, L]`, 1 on valid samples and 0 on padding.
    pub mask: Tensor,
    pub labels: Vec<usize>,
}

impl MaskedBatch {
    pub fn new(signals: Tensor, mask: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = signals.shape();
        if s.len() != 3 {
            return Err(Error::param(format!(
                "signals must be [N, C, L], got {s:?}"
            )));
        }
        if mask.shape() != [s[0], s[2]] {
            return Err(Error::param(format!(
                "mask {:?} does not match signals {s:?}",
                mask.shape()
            )));
        }
        if labels.len() != s[0] {
            return Err(Error::param(format!(
                "{} labels for {} signals",
                labels.len(),
                s[0]
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::param("mask entries must be 0 or 1"));
        }
        Ok(Self {
            signals,
            mask,
            labels,
        })
    }

    /// Stack `(signal [C, L], mask [L], label)` triples.
    pub fn from_samples<'a>(
        items: impl IntoIterator<Item = (&'a Tensor, &'a Tensor, usize)>,
    ) -> Result<Self> {
        let mut sig = Vec::new();
        let mut msk = Vec::new();
        let mut labels = Vec::new();
        for (s, m, y) in items {
            sig.push(s.clone());
            msk.push(m.clone());
            labels.push(y);
        }
        Self::new(Tensor::stack(&sig)?, Tensor::stack(&msk)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.signals.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.signals.shape()[2]
    }

    /// Same masks and labels with different signals (e.g. attacked ones).
    pub fn with_signals(&self, signals: Tensor) -> Result<Self> {
        if signals.shape() != self.signals.shape() {
            return Err(Error::param(format!(
                "replacement signals {:?} differ from {:?}",
                signals.shape(),
                self.signals.shape()
            )));
        }
        Ok(Self {
            signals,
            mask: self.mask.clone(),
            labels: self.labels.clone(),
        })
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            signals: self.signals.narrow_first(start, end)?,
            mask: self.mask.narrow_first(start, end)?,
            labels: self.labels[start..end].to_vec(),
        })
    }

    /// The mask broadcast over channels, `[N, C, L]`.
    pub fn channel_mask(&self) -> Tensor {
        let (n, c, l) = (self.len(), self.channels(), self.length());
        let mut data = Vec::with_capacity(n * c * l);
        for row in self.mask.data().chunks(l) {
            for _ in 0..c {
                data.extend_from_slice(row);
            }
        }
        Tensor::new(&[n, c, l], data).expect("shape computed from the batch")
    }
}
