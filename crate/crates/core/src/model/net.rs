use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{EcgNetConfig, MaskedBatch, CONV_STRIDE, POOL_SIZE};
use crate::autograd::{self, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Anything that maps masked signals to logits through a graph.
///
/// Losses, attacks and training are written against this trait so that small
/// analytic models can stand in for [`EcgNet`].
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn params(&self) -> &[Param];

    fn params_mut(&mut self) -> &mut [Param];

    /// Logits `[N, K]` for signals `x: [N, C, L]` with `mask: [N, L]`, using
    /// `params` bound on the same graph in the order of [`Classifier::params`].
    fn forward_with(&self, x: &Var, mask: &Tensor, params: &[Var]) -> Result<Var>;

    /// Place every parameter on `graph`, as leaves when `trainable`.
    fn bind(&self, graph: &Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .iter()
            .map(|p| {
                if trainable {
                    graph.leaf(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Logits with frozen parameters.
    fn forward(&self, x: &Var, mask: &Tensor) -> Result<Var> {
        let params = self.bind(x.graph(), false);
        self.forward_with(x, mask, &params)
    }

    /// Logits of a batch, outside any caller-visible graph.
    fn logits(&self, batch: &MaskedBatch) -> Result<Tensor> {
        let g = Graph::new();
        let x = g.constant(batch.signals.clone());
        Ok(self.forward(&x, &batch.mask)?.value())
    }

    /// Argmax class per sample (lowest index on ties).
    fn predict(&self, batch: &MaskedBatch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over parameter names, shapes and bit patterns.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Row-wise argmax of `[N, K]`.
pub fn argmax_rows(z: &Tensor) -> Vec<usize> {
    let k = z.shape()[1];
    z.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Average-pool `[N, L]` with kernel = stride = `factor`.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 2 {
        return Err(Error::param(format!("mask must be [N, L], got {s:?}")));
    }
    if factor == 0 || s[1] % factor != 0 {
        return Err(Error::param(format!(
            "mask length {} is not divisible by factor {factor}",
            s[1]
        )));
    }
    if factor == 1 {
        return Ok(mask.clone());
    }
    autograd::avg_pool_tensor(mask, factor, factor, 0)
}

/// `out[n, c] = sum_t f[n, c, t] m[n, t] / sum_t m[n, t]`.
pub fn masked_mean(features: &Var, mask: &Tensor) -> Result<Var> {
    let s = features.shape();
    if s.len() != 3 || mask.shape() != [s[0], s[2]] {
        return Err(Error::param(format!(
            "masked_mean: features {s:?} and mask {:?} disagree",
            mask.shape()
        )));
    }
    let (n, c, t) = (s[0], s[1], s[2]);
    let mut inv = Vec::with_capacity(n);
    for (i, row) in mask.data().chunks(t).enumerate() {
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Input(format!("mask row {i} has no valid positions")));
        }
        inv.push(1.0 / total);
    }
    let g = features.graph();
    let m = g
        .constant(mask.reshape(&[n, 1, t])?)
        .broadcast_to(&[n, c, t])?;
    let inv = g
        .constant(Tensor::new(&[n, 1, 1], inv)?)
        .broadcast_to(&[n, c, 1])?;
    features.mul(&m)?.sum_last().mul(&inv)?.reshape(&[n, c])
}

/// The convolutional classifier: a stem stage, `num_blocks` channel-doubling
/// stages, masked averaging over time and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgNet {
    config: EcgNetConfig,
    params: Vec<Param>,
}

const PER_STAGE: usize = 4;

impl EcgNet {
    /// Uniform `±sqrt(1/fan_in)` weights and biases, unit GN scale, zero GN shift.
    pub fn new(config: EcgNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let k = config.kernel_size;
        let mut c_in = config.in_channels;
        for stage in 0..=config.num_blocks {
            let c_out = config.stage_channels(stage);
            let prefix = stage_name(stage);
            let bound = (1.0 / (c_in * k) as f64).sqrt();
            params.push(uniform(
                &mut rng,
                format!("{prefix}.conv.weight"),
                &[c_out, c_in, k],
                bound,
            ));
            params.push(uniform(
                &mut rng,
                format!("{prefix}.conv.bias"),
                &[c_out],
                bound,
            ));
            params.push(Param {
                name: format!("{prefix}.gn.gamma"),
                value: Tensor::ones(&[c_out]),
            });
            params.push(Param {
                name: format!("{prefix}.gn.beta"),
                value: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }
        let f = config.feature_dim();
        let bound = (1.0 / f as f64).sqrt();
        params.push(uniform(
            &mut rng,
            "head.weight".into(),
            &[config.num_classes, f],
            bound,
        ));
        params.push(uniform(
            &mut rng,
            "head.bias".into(),
            &[config.num_classes],
            bound,
        ));
        Ok(Self { config, params })
    }

    /// Rebuild from a config and named tensors, checking names and shapes.
    pub fn from_params(config: EcgNetConfig, params: Vec<Param>) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::param(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.value.shape() != p.value.shape() {
                return Err(Error::param(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
        }
        Ok(Self {
            config: template.config,
            params,
        })
    }

    pub fn config(&self) -> &EcgNetConfig {
        &self.config
    }

    fn check_input(&self, x: &[usize], mask: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if x.len() != 3 || x[1] != cfg.in_channels {
            return Err(Error::param(format!(
                "expected [N, {}, L] signals, got {x:?}",
                cfg.in_channels
            )));
        }
        if x[2] % cfg.total_downsample != 0 {
            return Err(Error::param(format!(
                "signal length {} is not a multiple of {}",
                x[2], cfg.total_downsample
            )));
        }
        if mask != [x[0], x[2]] {
            return Err(Error::param(format!(
                "mask {mask:?} does not match signals {x:?}"
            )));
        }
        Ok(())
    }
}

fn stage_name(stage: usize) -> String {
    if stage == 0 {
        "stem".into()
    } else {
        format!("block{stage}")
    }
}

fn uniform(rng: &mut ChaCha8Rng, name: String, shape: &[usize], bound: f64) -> Param {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Param {
        name,
        value: Tensor::new(shape, data).expect("positive shape"),
    }
}

impl Classifier for EcgNet {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn forward_with(&self, x: &Var, mask: &Tensor, params: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        self.check_input(&x.shape(), mask.shape())?;
        if params.len() != self.params.len() {
            return Err(Error::param("parameter list does not match the network"));
        }
        let g = x.graph();
        let n = x.shape()[0];
        let mut h = x.clone();
        if cfg.mask_features {
            let s = x.shape();
            let mv = g.constant(mask.reshape(&[n, 1, s[2]])?).broadcast_to(&s)?;
            h = h.mul(&mv)?;
        }
        let mut factor = 1;
        for stage in 0..=cfg.num_blocks {
            let p = &params[stage * PER_STAGE..(stage + 1) * PER_STAGE];
            h = autograd::conv1d(&h, &p[0], Some(&p[1]), CONV_STRIDE, cfg.padding())?;
            factor *= CONV_STRIDE;
            let weights = if cfg.mask_features {
                Some(downsample_mask(mask, factor)?)
            } else {
                None
            };
            h = autograd::group_norm(
                &h,
                cfg.gn_groups,
                &p[2],
                &p[3],
                cfg.gn_eps,
                weights.as_ref(),
            )?
            .relu();
            h = autograd::max_pool1d(&h, POOL_SIZE, POOL_SIZE, 0)?;
            factor *= POOL_SIZE;
            if cfg.mask_features && stage < cfg.num_blocks {
                let m = downsample_mask(mask, factor)?;
                let s = h.shape();
                let mv = g.constant(m.reshape(&[n, 1, s[2]])?).broadcast_to(&s)?;
                h = h.mul(&mv)?;
            }
        }
        let out_mask = downsample_mask(mask, factor)?;
        let pooled = masked_mean(&h, &out_mask)?;
        let head = &params[(cfg.num_blocks + 1) * PER_STAGE..];
        autograd::linear(&pooled, &head[0], &head[1])
    }
}

/// `z = W vec(x) + b` on the flattened signal, ignoring the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    params: Vec<Param>,
}

impl LinearClassifier {
    /// `weight: [K, C*L]`, `bias: [K]`.
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[0]] {
            return Err(Error::param(format!(
                "linear classifier needs [K, D] weight and [K] bias, got {ws:?} and {:?}",
                bias.shape()
            )));
        }
        Ok(Self {
            params: vec![
                Param {
                    name: "weight".into(),
                    value: weight,
                },
                Param {
                    name: "bias".into(),
                    value: bias,
                },
            ],
        })
    }
}

impl Classifier for LinearClassifier {
    fn num_classes(&self) -> usize {
        self.params[0].value.shape()[0]
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn forward_with(&self, x: &Var, _mask: &Tensor, params: &[Var]) -> Result<Var> {
        let s = x.shape();
        let d: usize = s[1..].iter().product();
        let flat = x.reshape(&[s[0], d])?;
        autograd::linear(&flat, &params[0], &params[1])
    }
}
