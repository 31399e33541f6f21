//! Finite-difference oracles shared by the integration suites.
#![allow(dead_code)]

use ecg_robust::autograd::{self, Graph, Tensor, Var};
use ecg_robust::model::{Classifier, EcgNet, MaskedBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Relative error in max-norm: |a - b|_inf / max(|a|_inf, |b|_inf).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of several tensors, with respect
/// to input `which`.
pub fn fd_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize, h: f64) -> Vec<f64> {
    let base = inputs[which].to_vec();
    let shape = inputs[which].shape().to_vec();
    let mut out = Vec::with_capacity(base.len());
    let mut args = inputs.to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        args[which] = Tensor::new(&shape, plus).unwrap();
        let fp = f(&args);
        let mut minus = base.clone();
        minus[i] -= h;
        args[which] = Tensor::new(&shape, minus).unwrap();
        let fm = f(&args);
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// A differentiable scalar function of tensor inputs, built on a fresh graph.
pub type GraphFn = Box<dyn Fn(&Graph, &[Var]) -> Var>;

pub fn eval(f: &GraphFn, inputs: &[Tensor]) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    f(&g, &vars).item().unwrap()
}

pub fn autodiff(f: &GraphFn, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars);
    g.grad(&root, &vars, false)
        .unwrap()
        .into_iter()
        .zip(inputs)
        .map(|(gr, t)| {
            gr.map(|v| v.value().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect()
}

/// Worst relative error over every input of `f`.
pub fn check_first_order(f: &GraphFn, inputs: &[Tensor]) -> f64 {
    let ad = autodiff(f, inputs);
    let fun = |xs: &[Tensor]| eval(f, xs);
    (0..inputs.len())
        .map(|i| rel_err(&ad[i], &fd_grad(&fun, inputs, i, FD_STEP)))
        .fold(0.0, f64::max)
}

/// For `L(x) = |grad_x f(x)|^2`, compare the double-backprop gradient of L
/// against central differences of L, where L itself is evaluated with a
/// first-order pass.
pub fn check_second_order(f: &GraphFn, inputs: &[Tensor], wrt: usize) -> f64 {
    let grad_norm_sq = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let root = f(&g, &vars);
        let gx = g.grad(&root, &vars[..1], false).unwrap()[0]
            .clone()
            .unwrap();
        gx.value().data().iter().map(|v| v * v).sum()
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars);
    let gx = g.grad(&root, &vars[..1], true).unwrap()[0].clone().unwrap();
    let l = gx.square().sum();
    let ad = g.grad(&l, &vars[wrt..=wrt], false).unwrap()[0]
        .clone()
        .map(|v| v.value().to_vec())
        .unwrap_or_else(|| vec![0.0; inputs[wrt].numel()]);
    rel_err(&ad, &fd_grad(&grad_norm_sq, inputs, wrt, FD_STEP))
}

/// Weighted sum with a fixed pseudo-random weight, so every output element
/// matters to the scalar.
pub fn weighted_sum(v: &Var, salt: u64) -> Var {
    let mut r = rng(0xC0FFEE ^ salt);
    let w = random_tensor(&mut r, &v.shape(), -1.0, 1.0);
    v.mul(&v.graph().constant(w)).unwrap().sum()
}

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs drawn from (lo, hi); kept away from kinks where needed.
    pub range: (f64, f64),
    pub f: GraphFn,
}

/// One finite-difference case per differentiable primitive.
pub fn op_cases() -> Vec<OpCase> {
    fn case(
        name: &'static str,
        shapes: &[&[usize]],
        range: (f64, f64),
        f: impl Fn(&Graph, &[Var]) -> Var + 'static,
    ) -> OpCase {
        OpCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            range,
            f: Box::new(f),
        }
    }
    vec![
        case("add", &[&[3, 4], &[3, 4]], (-2.0, 2.0), |_, v| {
            weighted_sum(&v[0].add(&v[1]).unwrap(), 1)
        }),
        case("sub", &[&[3, 4], &[3, 4]], (-2.0, 2.0), |_, v| {
            weighted_sum(&v[0].sub(&v[1]).unwrap(), 2)
        }),
        case("mul", &[&[3, 4], &[3, 4]], (-2.0, 2.0), |_, v| {
            weighted_sum(&v[0].mul(&v[1]).unwrap(), 3)
        }),
        case("div", &[&[3, 4], &[3, 4]], (0.5, 2.0), |_, v| {
            weighted_sum(&v[0].div(&v[1]).unwrap(), 4)
        }),
        case("neg_scale_shift", &[&[5]], (-2.0, 2.0), |_, v| {
            weighted_sum(&v[0].neg().scale(1.7).add_scalar(0.3), 5)
        }),
        case("sqrt", &[&[6]], (0.2, 3.0), |_, v| {
            weighted_sum(&v[0].sqrt(), 6)
        }),
        case("log", &[&[6]], (0.2, 3.0), |_, v| {
            weighted_sum(&v[0].ln(), 7)
        }),
        case("exp", &[&[6]], (-2.0, 2.0), |_, v| {
            weighted_sum(&v[0].exp(), 8)
        }),
        case("abs", &[&[6]], (-2.0, 2.0), |_, v| {
            weighted_sum(&v[0].abs(), 9)
        }),
        case("square", &[&[6]], (-2.0, 2.0), |_, v| {
            weighted_sum(&v[0].square(), 10)
        }),
        case("relu", &[&[8]], (-2.0, 2.0), |_, v| {
            weighted_sum(&v[0].relu(), 11)
        }),
        case("maximum", &[&[8], &[8]], (-2.0, 2.0), |_, v| {
            weighted_sum(&v[0].maximum(&v[1]).unwrap(), 12)
        }),
        case("sum_mean", &[&[2, 3]], (-2.0, 2.0), |_, v| {
            v[0].square().mean().add(&v[0].sum()).unwrap()
        }),
        case(
            "reshape_broadcast_sum_to",
            &[&[2, 1, 3]],
            (-2.0, 2.0),
            |_, v| {
                let b = v[0].broadcast_to(&[2, 4, 3]).unwrap();
                let s = b
                    .square()
                    .sum_to(&[1, 4, 1])
                    .unwrap()
                    .reshape(&[4])
                    .unwrap();
                weighted_sum(&s, 13)
            },
        ),
        case(
            "matmul_transpose",
            &[&[3, 4], &[2, 4]],
            (-1.0, 1.0),
            |_, v| weighted_sum(&v[0].matmul(&v[1].transpose().unwrap()).unwrap(), 14),
        ),
        case("linear", &[&[3, 5], &[4, 5], &[4]], (-1.0, 1.0), |_, v| {
            weighted_sum(&autograd::linear(&v[0], &v[1], &v[2]).unwrap(), 15)
        }),
        case(
            "conv1d",
            &[&[2, 3, 11], &[4, 3, 5], &[4]],
            (-1.0, 1.0),
            |_, v| {
                weighted_sum(
                    &autograd::conv1d(&v[0], &v[1], Some(&v[2]), 2, 2).unwrap(),
                    16,
                )
            },
        ),
        case("max_pool1d", &[&[2, 3, 10]], (-1.0, 1.0), |_, v| {
            weighted_sum(&autograd::max_pool1d(&v[0], 3, 2, 1).unwrap(), 17)
        }),
        case("avg_pool1d", &[&[2, 3, 10]], (-1.0, 1.0), |_, v| {
            weighted_sum(&autograd::avg_pool1d(&v[0], 3, 2, 1).unwrap(), 18)
        }),
        case(
            "group_norm",
            &[&[2, 4, 6], &[4], &[4]],
            (-1.0, 1.0),
            |_, v| {
                weighted_sum(
                    &autograd::group_norm(&v[0], 2, &v[1], &v[2], 1e-5, None).unwrap(),
                    19,
                )
            },
        ),
        case(
            "group_norm_weighted",
            &[&[2, 4, 6], &[4], &[4]],
            (-1.0, 1.0),
            |_, v| {
                let w = Tensor::new(
                    &[2, 6],
                    vec![1., 1., 1., 0.5, 0., 0., 0., 1., 1., 1., 1., 0.25],
                )
                .unwrap();
                weighted_sum(
                    &autograd::group_norm(&v[0], 2, &v[1], &v[2], 1e-5, Some(&w)).unwrap(),
                    20,
                )
            },
        ),
    ]
}

/// Small conv net used for higher-order checks: conv, GN, relu, pool, linear.
/// Inputs: x [2, 3, 16], conv w [4, 3, 5], conv b [4], linear w [3, 4], linear b [3].
pub fn tiny_net_logits(v: &[Var]) -> Var {
    let h = autograd::conv1d(&v[0], &v[1], Some(&v[2]), 2, 2).unwrap();
    let one = v[0].graph().constant(Tensor::ones(&[4]));
    let zero = v[0].graph().constant(Tensor::zeros(&[4]));
    let h = autograd::group_norm(&h, 2, &one, &zero, 1e-5, None)
        .unwrap()
        .relu();
    let h = autograd::max_pool1d(&h, 2, 2, 0).unwrap();
    let pooled = h.sum_last().reshape(&[2, 4]).unwrap().scale(0.25);
    autograd::linear(&pooled, &v[3], &v[4]).unwrap()
}

pub fn tiny_net_shapes() -> Vec<Vec<usize>> {
    vec![vec![2, 3, 16], vec![4, 3, 5], vec![4], vec![3, 4], vec![3]]
}

pub fn random_inputs(seed: u64, shapes: &[Vec<usize>], range: (f64, f64)) -> Vec<Tensor> {
    let mut r = rng(seed);
    shapes
        .iter()
        .map(|s| random_tensor(&mut r, s, range.0, range.1))
        .collect()
}

/// conv(3, pad 1) -> relu -> maxpool 2 -> linear -> relu -> linear, ignoring the mask.
/// Piecewise linear in the input.
#[derive(Clone)]
pub struct ReluNet {
    params: Vec<ecg_robust::model::Param>,
}

impl ReluNet {
    pub fn new(seed: u64, channels: usize, len: usize, hidden: usize, classes: usize) -> Self {
        let mut r = rng(seed);
        let conv_out = 3;
        let flat = conv_out * len / 2;
        let shapes: [(&str, Vec<usize>); 6] = [
            ("conv.weight", vec![conv_out, channels, 3]),
            ("conv.bias", vec![conv_out]),
            ("fc1.weight", vec![hidden, flat]),
            ("fc1.bias", vec![hidden]),
            ("fc2.weight", vec![classes, hidden]),
            ("fc2.bias", vec![classes]),
        ];
        let params = shapes
            .into_iter()
            .map(|(name, s)| ecg_robust::model::Param {
                name: name.into(),
                value: random_tensor(&mut r, &s, -0.6, 0.6),
            })
            .collect();
        Self { params }
    }

    /// Pre-activations of both ReLU layers and the logits.
    pub fn stages(x: &Var, p: &[Var]) -> (Var, Var, Var) {
        let n = x.shape()[0];
        let conv = autograd::conv1d(x, &p[0], Some(&p[1]), 1, 1).unwrap();
        let pooled = autograd::max_pool1d(&conv.relu(), 2, 2, 0).unwrap();
        let s = pooled.shape();
        let flat = pooled.reshape(&[n, s[1] * s[2]]).unwrap();
        let h = autograd::linear(&flat, &p[2], &p[3]).unwrap();
        let z = autograd::linear(&h.relu(), &p[4], &p[5]).unwrap();
        (conv, h, z)
    }

    /// Activation pattern at `x`: ReLU signs and max-pool winners.
    pub fn pattern(&self, x: &Tensor) -> Vec<i64> {
        use ecg_robust::model::Classifier;
        let g = Graph::new();
        let p = self.bind(&g, false);
        let (conv, h, _) = Self::stages(&g.constant(x.clone()), &p);
        let c = conv.value();
        let mut out: Vec<i64> = c.data().iter().map(|&v| (v > 0.0) as i64).collect();
        let relu: Vec<f64> = c.data().iter().map(|v| v.max(0.0)).collect();
        out.extend(relu.chunks(2).map(|w| (w[1] > w[0]) as i64));
        out.extend(h.value().data().iter().map(|&v| (v > 0.0) as i64));
        out
    }
}

impl ecg_robust::model::Classifier for ReluNet {
    fn num_classes(&self) -> usize {
        self.params[4].value.shape()[0]
    }

    fn params(&self) -> &[ecg_robust::model::Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [ecg_robust::model::Param] {
        &mut self.params
    }

    fn forward_with(&self, x: &Var, _mask: &Tensor, params: &[Var]) -> ecg_robust::Result<Var> {
        Ok(Self::stages(x, params).2)
    }
}

/// A small EcgNet: 2 leads, 16 samples, one stage, 3 classes.
pub fn tiny_ecgnet(seed: u64) -> ecg_robust::model::EcgNet {
    let cfg = ecg_robust::model::EcgNetConfig {
        in_channels: 2,
        input_length: 16,
        num_classes: 3,
        stem_channels: 2,
        num_blocks: 0,
        total_downsample: 4,
        kernel_size: 3,
        gn_groups: 1,
        ..Default::default()
    };
    ecg_robust::model::EcgNet::new(cfg, seed).unwrap()
}

/// Random batch with a partial mask on the last sample.
pub fn random_batch(
    seed: u64,
    n: usize,
    c: usize,
    l: usize,
    k: usize,
) -> ecg_robust::model::MaskedBatch {
    let mut r = rng(seed);
    let mut mask = vec![1.0; n * l];
    for t in 0..l / 4 {
        mask[(n - 1) * l + t] = 0.0;
    }
    let mut x = random_tensor(&mut r, &[n, c, l], -1.0, 1.0).to_vec();
    for s in 0..n {
        for ch in 0..c {
            for t in 0..l {
                x[(s * c + ch) * l + t] *= mask[s * l + t];
            }
        }
    }
    let labels = (0..n).map(|_| r.gen_range(0..k)).collect();
    ecg_robust::model::MaskedBatch::new(
        Tensor::new(&[n, c, l], x).unwrap(),
        Tensor::new(&[n, l], mask).unwrap(),
        labels,
    )
    .unwrap()
}

pub type LossFn<'a> = dyn Fn(&EcgNet, &[Var], &MaskedBatch) -> Var + 'a;

pub fn loss_at(net: &EcgNet, batch: &MaskedBatch, values: &[Tensor], f: &LossFn) -> f64 {
    let g = Graph::new();
    let params: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
    f(net, &params, batch).item().unwrap()
}

/// Worst relative error of the parameter gradient over `samples` random
/// coordinates against central differences.
pub fn spot_check(seed: u64, f: &LossFn, samples: usize) -> f64 {
    let net = tiny_ecgnet(seed);
    let batch = random_batch(seed + 1000, 3, 2, 16, 3);
    let values: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
    let g = Graph::new();
    let params = net.bind(&g, true);
    let loss = f(&net, &params, &batch);
    let grads = g.grad(&loss, &params, false).unwrap();
    let mut r = rng(seed + 2000);
    let (mut ad, mut fd) = (Vec::new(), Vec::new());
    for _ in 0..samples {
        let pi = r.gen_range(0..values.len());
        let ei = r.gen_range(0..values[pi].numel());
        ad.push(grads[pi].as_ref().map_or(0.0, |v| v.value().data()[ei]));
        let shifted = |h: f64| {
            let mut vs = values.clone();
            let mut d = vs[pi].to_vec();
            d[ei] += h;
            vs[pi] = Tensor::new(vs[pi].shape(), d).unwrap();
            loss_at(&net, &batch, &vs, f)
        };
        fd.push((shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP));
    }
    rel_err(&ad, &fd)
}

/// `w_y = dz_y/dx` of a ReLU net, per sample, flattened.
pub fn effective_weights(net: &ReluNet, batch: &MaskedBatch) -> (Vec<f64>, Vec<f64>) {
    let g = Graph::new();
    let p = net.bind(&g, false);
    let x = g.leaf(batch.signals.clone());
    let z = net.forward_with(&x, &batch.mask, &p).unwrap();
    let k = net.num_classes();
    let mut sel = vec![0.0; batch.len() * k];
    for (n, &y) in batch.labels.iter().enumerate() {
        sel[n * k + y] = 1.0;
    }
    let zy = z
        .mul(&g.constant(Tensor::new(&[batch.len(), k], sel).unwrap()))
        .unwrap()
        .sum_last();
    let w = g.grad(&zy.sum(), &[x], false).unwrap()[0]
        .as_ref()
        .unwrap()
        .value();
    (w.to_vec(), zy.value().to_vec())
}
