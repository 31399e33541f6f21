//! L-infinity PGD and uniform white noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::defenses::loss_ce;
use crate::error::{Error, Result};
use crate::model::{Classifier, MaskedBatch};

/// Objective ascended by the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    /// Mean cross-entropy against the true labels.
    #[default]
    CrossEntropy,
    /// Negative true-class logit, `-sum_n z[n, y_n]`.
    NegTrueLogit,
}

impl AttackLoss {
    pub fn eval(self, logits: &Var, labels: &[usize]) -> Result<Var> {
        match self {
            AttackLoss::CrossEntropy => loss_ce(logits, labels),
            AttackLoss::NegTrueLogit => {
                let g = logits.graph();
                let onehot = g.constant(one_hot(labels, logits.shape()[1])?);
                Ok(logits.mul(&onehot)?.sum().neg())
            }
        }
    }
}

/// `[N, K]` indicator of the labels.
pub(crate) fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::param(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        data[i * k + y] = 1.0;
    }
    Tensor::new(&[labels.len(), k], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity radius.
    pub epsilon: f64,
    pub steps: usize,
    /// Step size; `None` means `2.5 * epsilon / steps`.
    pub alpha: Option<f64>,
    pub random_start: bool,
    pub perturb_padding: bool,
    pub loss: AttackLoss,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            steps: 100,
            alpha: None,
            random_start: false,
            perturb_padding: false,
            loss: AttackLoss::CrossEntropy,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self {
            epsilon,
            steps,
            ..Self::default()
        }
    }

    pub fn step_size(&self) -> f64 {
        self.alpha
            .unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::param(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::param("attack needs at least one step"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::param(format!("alpha must be positive, got {a}")));
            }
        }
        Ok(())
    }

    /// Non-fatal configuration problems.
    pub fn warnings(&self) -> Vec<String> {
        let reach = self.step_size() * self.steps as f64;
        if reach < self.epsilon {
            vec![format!(
                "alpha*steps = {reach} is below epsilon = {}; the attack cannot reach the ball boundary",
                self.epsilon
            )]
        } else {
            Vec::new()
        }
    }
}

/// K-step projected sign-gradient ascent; returns `x^K`.
pub fn pgd_attack<C: Classifier + ?Sized>(
    net: &C,
    batch: &MaskedBatch,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    pgd_attack_traced(net, batch, cfg, |_, _| {})
}

/// As [`pgd_attack`], calling `observe(k, x^k)` after every step.
pub fn pgd_attack_traced<C: Classifier + ?Sized>(
    net: &C,
    batch: &MaskedBatch,
    cfg: &AttackConfig,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    cfg.validate()?;
    let x = &batch.signals;
    if cfg.epsilon == 0.0 {
        for k in 1..=cfg.steps {
            observe(k, x);
        }
        return Ok(x.clone());
    }
    let eps = cfg.epsilon;
    let alpha = cfg.step_size();
    let region = (!cfg.perturb_padding).then(|| batch.channel_mask());
    let mut delta = if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d: Vec<f64> = (0..x.numel()).map(|_| rng.gen_range(-eps..=eps)).collect();
        let d = Tensor::new(x.shape(), d)?;
        match &region {
            Some(m) => d.zip_map(m, |a, b| a * b)?,
            None => d,
        }
    } else {
        Tensor::zeros(x.shape())
    };
    for k in 1..=cfg.steps {
        let current = x.zip_map(&delta, |a, b| a + b)?;
        let g = Graph::new();
        let xv = g.leaf(current);
        let logits = net.forward(&xv, &batch.mask)?;
        let loss = cfg.loss.eval(&logits, &batch.labels)?;
        let grad = g.grad(&loss, &[xv], false)?[0]
            .as_ref()
            .map(|v| v.value())
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut step = grad.map(|v| alpha * sign(v));
        if let Some(m) = &region {
            step = step.zip_map(m, |a, b| a * b)?;
        }
        delta = delta.zip_map(&step, |d, s| (d + s).clamp(-eps, eps))?;
        let xk = x.zip_map(&delta, |a, b| a + b)?;
        observe(k, &xk);
        if k == cfg.steps {
            return Ok(xk);
        }
    }
    unreachable!("steps >= 1 was validated")
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + eta` with `eta ~ U(-epsilon, epsilon)` i.i.d.; zero on padding unless
/// `perturb_padding`.
pub fn uniform_noise(
    batch: &MaskedBatch,
    epsilon: f64,
    perturb_padding: bool,
    seed: u64,
) -> Result<Tensor> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::param(format!(
            "epsilon must be finite and >= 0, got {epsilon}"
        )));
    }
    let x = &batch.signals;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eta: Vec<f64> = (0..x.numel())
        .map(|_| rng.gen_range(-epsilon..=epsilon))
        .collect();
    let mut eta = Tensor::new(x.shape(), eta)?;
    if !perturb_padding {
        eta = eta.zip_map(&batch.channel_mask(), |a, b| a * b)?;
    }
    x.zip_map(&eta, |a, b| a + b)
}
