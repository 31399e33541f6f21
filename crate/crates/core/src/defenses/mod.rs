//! Training objectives and the shared training loop.

mod losses;
mod optim;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{
    adv_combine, jacobian_penalty, loss_adv, loss_ce, loss_jacobian, loss_nsr, nsr_bound,
    nsr_objective, ramp_epsilon, training_attack, NsrTerms, NSR_LOGIT_FLOOR,
};
pub use optim::{Adam, AdamConfig};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::{assemble, PreparedRecord};
use crate::error::{Error, Result};
use crate::eval::{accuracy, macro_f1, predict_chunked};
use crate::model::{Classifier, MaskedBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ce,
    Adv,
    Jacob,
    Nsr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ce, Method::Adv, Method::Jacob, Method::Nsr];

    pub fn label(self) -> &'static str {
        match self {
            Method::Ce => "CE",
            Method::Adv => "ADV",
            Method::Jacob => "JACOB",
            Method::Nsr => "NSR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(Method::Ce),
            "adv" => Ok(Method::Adv),
            "jacob" => Ok(Method::Jacob),
            "nsr" => Ok(Method::Nsr),
            _ => Err(Error::param(format!(
                "unknown method {s:?}; expected ce, adv, jacob or nsr"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Largest ADV training noise level.
    pub epsilon: f64,
    /// JACOB coefficient.
    pub lambda: f64,
    /// NSR coefficient.
    pub beta: f64,
    /// NSR noise bound.
    pub eps_max: f64,
    /// PGD steps for ADV training examples.
    pub adv_steps: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ce,
            epochs: 70,
            batch_size: 64,
            warmup_epochs: 10,
            epsilon: 0.01,
            lambda: 44.0,
            beta: 1.0,
            eps_max: 1.0,
            adv_steps: 20,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs <= self.warmup_epochs {
            return Err(Error::param(format!(
                "epochs ({}) must exceed warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            )));
        }
        if self.batch_size == 0 || self.adv_steps == 0 {
            return Err(Error::param("batch_size and adv_steps must be ≥ 1"));
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("eps_max", self.eps_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(format!(
                    "{name} must be a finite value ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Training noise level reported for `epoch` (ADV only, 0 otherwise).
    pub fn epsilon_at(&self, epoch: usize) -> Result<f64> {
        match self.method {
            Method::Adv => ramp_epsilon(epoch, self.epochs, self.warmup_epochs, self.epsilon),
            _ => Ok(0.0),
        }
    }
}

/// The scalar objective of `cfg.method` for one batch at `epoch`.
pub fn method_loss<C: Classifier + ?Sized>(
    net: &C,
    params: &[Var],
    batch: &MaskedBatch,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Var> {
    match cfg.method {
        Method::Ce => {
            let g = params[0].graph();
            let logits =
                net.forward_with(&g.constant(batch.signals.clone()), &batch.mask, params)?;
            loss_ce(&logits, &batch.labels)
        }
        Method::Adv => loss_adv(net, params, batch, cfg, epoch),
        Method::Jacob => loss_jacobian(net, params, batch, cfg, epoch),
        Method::Nsr => nsr_objective(net, params, batch, cfg, epoch),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub epsilon_t: f64,
}

pub struct TrainOutcome<C> {
    /// Network after the last epoch.
    pub last: C,
    /// Network from the epoch with the highest validation macro F1 (earliest on ties).
    pub best: C,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// [`train_with`] without a progress callback.
pub fn train<C: Classifier + Clone>(
    net: C,
    records: &[&PreparedRecord],
    val: &MaskedBatch,
    length: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<C>> {
    train_with(net, records, val, length, cfg, |_| {})
}

/// Minibatch training on `records`, each placed at a fresh random offset in a
/// `length` window every epoch; validation after each epoch.
pub fn train_with<C: Classifier + Clone>(
    mut net: C,
    records: &[&PreparedRecord],
    val: &MaskedBatch,
    length: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<C>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Input("no training records".into()));
    }
    let mut opt = Adam::new(cfg.optimizer.clone(), net.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, C)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let offsets: Vec<usize> = order
            .iter()
            .map(|&i| records[i].random_offset(length, &mut rng))
            .collect();
        let mut total = 0.0;
        for (b, (idx, offs)) in order
            .chunks(cfg.batch_size)
            .zip(offsets.chunks(cfg.batch_size))
            .enumerate()
        {
            let chosen: Vec<&PreparedRecord> = idx.iter().map(|&i| records[i]).collect();
            let batch = assemble(&chosen, offs, length)?;
            let g = Graph::new();
            let params = net.bind(&g, true);
            let loss = method_loss(&net, &params, &batch, cfg, epoch)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b + 1,
                    value,
                });
            }
            let grads: Vec<Tensor> = g
                .grad(&loss, &params, false)?
                .into_iter()
                .zip(net.params())
                .map(|(gr, p)| gr.map_or_else(|| Tensor::zeros(p.value.shape()), |v| v.value()))
                .collect();
            opt.step(net.params_mut(), &grads)?;
            total += value * idx.len() as f64;
        }
        let preds = predict_chunked(&net, val, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            loss: total / records.len() as f64,
            val_acc: accuracy(&preds, &val.labels)?,
            val_f1: macro_f1(&preds, &val.labels, net.num_classes())?,
            epsilon_t: cfg.epsilon_at(epoch)?,
        };
        if best.as_ref().map_or(true, |(f1, _, _)| rec.val_f1 > *f1) {
            best = Some((rec.val_f1, epoch, net.clone()));
        }
        on_epoch(&rec);
        history.push(rec);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        last: net,
        best,
        best_epoch,
        history,
    })
}

/// History as CSV: `epoch,loss,val_acc,val_f1,epsilon_t`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,val_acc,val_f1,epsilon_t\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.loss, r.val_acc, r.val_f1, r.epsilon_t
        ));
    }
    out
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

/// NSR coefficient grid searched on the validation set.
pub const BETA_GRID: [f64; 9] = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2];

/// JACOB coefficient grid searched on the validation set.
pub const LAMBDA_GRID: [f64; 9] = [4.0, 14.0, 24.0, 34.0, 44.0, 54.0, 64.0, 74.0, 84.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub coefficient: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    /// Validation accuracy under the tuning attack.
    pub val_robust_acc: f64,
}

/// The largest coefficient reached, scanning upward, before clean validation
/// F1 falls more than `tolerance` below the best F1 seen so far.
pub fn select_coefficient(rows: &[TuneRow], tolerance: f64) -> Result<f64> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.coefficient.total_cmp(&b.coefficient));
    let first = sorted
        .first()
        .ok_or_else(|| Error::Input("empty tuning grid".into()))?;
    let (mut best_f1, mut chosen) = (first.val_f1, first.coefficient);
    for r in &sorted[1..] {
        if r.val_f1 < best_f1 - tolerance {
            break;
        }
        best_f1 = best_f1.max(r.val_f1);
        chosen = r.coefficient;
    }
    Ok(chosen)
}

/// Tuning table as CSV: `coefficient,val_acc,val_f1,val_robust_acc`.
pub fn tune_csv(rows: &[TuneRow]) -> String {
    let mut out = String::from("coefficient,val_acc,val_f1,val_robust_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.coefficient, r.val_acc, r.val_f1, r.val_robust_acc
        ));
    }
    out
}
