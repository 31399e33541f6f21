use crate::attacks::{one_hot, pgd_attack, AttackConfig};
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Classifier, MaskedBatch};

use super::TrainConfig;

/// Lower clamp on `|z_y|` in the NSR bound.
pub const NSR_LOGIT_FLOOR: f64 = 1e-4;

/// Mean over the batch of `-log softmax(z)[y]`.
pub fn loss_ce(logits: &Var, labels: &[usize]) -> Result<Var> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::param(format!(
            "logits {s:?} do not match {} labels",
            labels.len()
        )));
    }
    let (n, k) = (s[0], s[1]);
    let g = logits.graph();
    let onehot = g.constant(one_hot(labels, k)?);
    // Shift by the detached row max; the loss value is unchanged.
    let z = logits.value();
    let maxes: Vec<f64> = z
        .data()
        .chunks(k)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = g
        .constant(Tensor::new(&[n, 1], maxes)?)
        .broadcast_to(&[n, k])?;
    let shifted = logits.sub(&shift)?;
    let lse = shifted.exp().sum_last().ln();
    let picked = shifted.mul(&onehot)?.sum_last();
    Ok(lse.sub(&picked)?.mean())
}

/// `epsilon (t - warmup) / (t_max - warmup)`, clamped to `[0, epsilon]`.
pub fn ramp_epsilon(t: usize, t_max: usize, warmup: usize, epsilon: f64) -> Result<f64> {
    if t_max <= warmup {
        return Err(Error::param(format!(
            "t_max ({t_max}) must exceed the warmup ({warmup})"
        )));
    }
    if t == 0 {
        return Err(Error::param("epochs are counted from 1"));
    }
    let frac = (t as f64 - warmup as f64) / (t_max - warmup) as f64;
    Ok((epsilon * frac).clamp(0.0, epsilon))
}

/// The PGD configuration used to craft training examples at level `epsilon`.
pub fn training_attack(cfg: &TrainConfig, epsilon: f64) -> AttackConfig {
    AttackConfig {
        seed: cfg.seed,
        ..AttackConfig::pgd(epsilon, cfg.adv_steps)
    }
}

/// `0.5 CE(x) + 0.5 CE(x_adv)` after warmup, plain CE before.
pub fn loss_adv<C: Classifier + ?Sized>(
    net: &C,
    params: &[Var],
    batch: &MaskedBatch,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Var> {
    let g = params[0].graph();
    let clean = net.forward_with(&g.constant(batch.signals.clone()), &batch.mask, params)?;
    let ce_clean = loss_ce(&clean, &batch.labels)?;
    if epoch <= cfg.warmup_epochs {
        return Ok(ce_clean);
    }
    let eps_t = ramp_epsilon(epoch, cfg.epochs, cfg.warmup_epochs, cfg.epsilon)?;
    let x_adv = pgd_attack(net, batch, &training_attack(cfg, eps_t))?;
    adv_combine(net, params, batch, &ce_clean, x_adv)
}

/// `0.5 ce_clean + 0.5 CE(x_adv)` for a given adversarial input.
pub fn adv_combine<C: Classifier + ?Sized>(
    net: &C,
    params: &[Var],
    batch: &MaskedBatch,
    ce_clean: &Var,
    x_adv: Tensor,
) -> Result<Var> {
    let g = params[0].graph();
    let adv = net.forward_with(&g.constant(x_adv), &batch.mask, params)?;
    let ce_adv = loss_ce(&adv, &batch.labels)?;
    Ok(ce_clean.scale(0.5).add(&ce_adv.scale(0.5))?)
}

/// `(1 / (N K)) sqrt(sum_{n,k,d} (dz_k(x_n)/dx_d)^2)` with `x` a leaf of the
/// graph, computed with K differentiable backward passes.
pub fn jacobian_penalty(logits: &Var, x: &Var) -> Result<Var> {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let g = logits.graph();
    let mut total: Option<Var> = None;
    for class in 0..k {
        let mut sel = vec![0.0; n * k];
        for row in 0..n {
            sel[row * k + class] = 1.0;
        }
        let zk = logits.mul(&g.constant(Tensor::new(&[n, k], sel)?))?.sum();
        let Some(jk) = g.grad(&zk, std::slice::from_ref(x), true)?.remove(0) else {
            continue;
        };
        let sq = jk.square().sum();
        total = Some(match total {
            Some(t) => t.add(&sq)?,
            None => sq,
        });
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    Ok(total.sqrt().scale(1.0 / (n * k) as f64))
}

/// CE plus `lambda` times the Jacobian penalty after warmup.
pub fn loss_jacobian<C: Classifier + ?Sized>(
    net: &C,
    params: &[Var],
    batch: &MaskedBatch,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Var> {
    let g = params[0].graph();
    let active = epoch > cfg.warmup_epochs && cfg.lambda != 0.0;
    let x = if active {
        g.leaf(batch.signals.clone())
    } else {
        g.constant(batch.signals.clone())
    };
    let logits = net.forward_with(&x, &batch.mask, params)?;
    let ce = loss_ce(&logits, &batch.labels)?;
    if !active {
        return Ok(ce);
    }
    let reg = jacobian_penalty(&logits, &x)?;
    Ok(ce.add(&reg.scale(cfg.lambda))?)
}

/// Per-sample pieces of the NSR bound, all `[N, 1]` and differentiable.
pub struct NsrTerms {
    pub logits: Var,
    /// `|w_y|_1`, with `w_y = dz_y/dx`.
    pub w_norm: Var,
    /// `max(|z_y|, NSR_LOGIT_FLOOR)`.
    pub z_abs: Var,
    /// `|w_y|_1 eps_max / max(|z_y|, floor)`.
    pub r2: Var,
    /// Whether `argmax z == y`.
    pub correct: Vec<bool>,
}

impl NsrTerms {
    /// Plain values per sample: `(|w_y|_1, |z_y|, R_2, correct)`.
    pub fn values(&self) -> Vec<(f64, f64, f64, bool)> {
        let (w, z, r) = (self.w_norm.value(), self.z_abs.value(), self.r2.value());
        (0..self.correct.len())
            .map(|i| (w.data()[i], z.data()[i], r.data()[i], self.correct[i]))
            .collect()
    }
}

/// Forward pass with the signals as a leaf, plus the NSR bound per sample.
pub fn nsr_bound<C: Classifier + ?Sized>(
    net: &C,
    params: &[Var],
    batch: &MaskedBatch,
    eps_max: f64,
) -> Result<NsrTerms> {
    if !(eps_max >= 0.0) {
        return Err(Error::param(format!("eps_max must be >= 0, got {eps_max}")));
    }
    let g = params[0].graph();
    let x = g.leaf(batch.signals.clone());
    let logits = net.forward_with(&x, &batch.mask, params)?;
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let onehot = g.constant(one_hot(&batch.labels, k)?);
    let zy = logits.mul(&onehot)?.sum_last();
    let w = g
        .grad(&zy.sum(), std::slice::from_ref(&x), true)?
        .remove(0)
        .unwrap_or_else(|| g.constant(Tensor::zeros(&x.shape())));
    let d = w.shape()[1..].iter().product();
    let w_norm = w.abs().reshape(&[n, d])?.sum_last();
    let floor = g.constant(Tensor::full(&[n, 1], NSR_LOGIT_FLOOR));
    let z_abs = zy.abs().maximum(&floor)?;
    let r2 = w_norm.scale(eps_max).div(&z_abs)?;
    let pred = crate::model::argmax_rows(&logits.value());
    let correct = pred
        .iter()
        .zip(&batch.labels)
        .map(|(p, y)| p == y)
        .collect();
    Ok(NsrTerms {
        logits,
        w_norm,
        z_abs,
        r2,
        correct,
    })
}

/// Batch mean of `sum_k (z_k - [k = y])^2`, plus, for correctly classified
/// samples once `regularize` is set, the margin `sum_{i != y} max(0, 1 - z_y + z_i)`
/// and `beta ln(1 + R_2)`.
pub fn loss_nsr(
    logits: &Var,
    nsr: Option<&NsrTerms>,
    labels: &[usize],
    beta: f64,
    regularize: bool,
) -> Result<Var> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::param(format!(
            "logits {s:?} do not match {} labels",
            labels.len()
        )));
    }
    let (n, k) = (s[0], s[1]);
    let g = logits.graph();
    let onehot_t = one_hot(labels, k)?;
    let onehot = g.constant(onehot_t.clone());
    let mse = logits.sub(&onehot)?.square().sum_last();
    if !regularize {
        return Ok(mse.mean());
    }
    let nsr = nsr.ok_or_else(|| Error::Usage("NSR regularization needs the bound terms".into()))?;
    let pred = crate::model::argmax_rows(&logits.value());
    let active: Vec<f64> = pred
        .iter()
        .zip(labels)
        .map(|(p, y)| if p == y { 1.0 } else { 0.0 })
        .collect();
    let active = g.constant(Tensor::new(&[n, 1], active)?);
    let zy = logits.mul(&onehot)?.sum_last().broadcast_to(&[n, k])?;
    let others = g.constant(onehot_t.map(|v| 1.0 - v));
    let margin = logits
        .sub(&zy)?
        .add_scalar(1.0)
        .relu()
        .mul(&others)?
        .sum_last();
    let reg = nsr.r2.add_scalar(1.0).ln().scale(beta);
    let extra = margin.add(&reg)?.mul(&active)?;
    Ok(mse.add(&extra)?.mean())
}

/// Full NSR objective: pure MSE through warmup, then MSE, margin and bound.
pub fn nsr_objective<C: Classifier + ?Sized>(
    net: &C,
    params: &[Var],
    batch: &MaskedBatch,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Var> {
    if epoch <= cfg.warmup_epochs {
        let g = params[0].graph();
        let logits = net.forward_with(&g.constant(batch.signals.clone()), &batch.mask, params)?;
        return loss_nsr(&logits, None, &batch.labels, cfg.beta, false);
    }
    let terms = nsr_bound(net, params, batch, cfg.eps_max)?;
    loss_nsr(&terms.logits, Some(&terms), &batch.labels, cfg.beta, true)
}
