//! Network layers composed from graph primitives.

use std::sync::Arc;

use super::graph::{avg_pool_raw, conv_raw, gather, group_norm_raw, GnSpec, Var};
use super::kernels::{self, Window};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_GN_EPS: f64 = 1e-5;

/// Lift `[C, L]` to `[1, C, L]`; returns whether it was lifted.
fn as_batched(x: &Var) -> Result<(Var, bool)> {
    match x.shape().len() {
        2 => {
            let s = x.shape();
            Ok((x.reshape(&[1, s[0], s[1]])?, true))
        }
        3 => Ok((x.clone(), false)),
        _ => Err(Error::param(format!(
            "expected [C, L] or [N, C, L], got {:?}",
            x.shape()
        ))),
    }
}

fn unbatch(y: Var, lifted: bool) -> Result<Var> {
    if lifted {
        let s = y.shape();
        y.reshape(&s[1..])
    } else {
        Ok(y)
    }
}

/// Cross-correlation of `x` ([C_in, L] or [N, C_in, L]) with `w` ([C_out, C_in, K]).
pub fn conv1d(x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
    let (xb, lifted) = as_batched(x)?;
    let xs = xb.shape();
    let ws = w.shape();
    if ws.len() != 3 || ws[1] != xs[1] {
        return Err(Error::param(format!(
            "conv1d weight {ws:?} does not match input {xs:?}"
        )));
    }
    let geom = Window::new(xs[2], ws[2], stride, pad).ok_or_else(|| {
        Error::param(format!(
            "conv1d geometry invalid: L={} k={} stride={stride} pad={pad}",
            xs[2], ws[2]
        ))
    })?;
    let mut y = conv_raw(&xb, w, geom);
    if let Some(b) = b {
        if b.shape() != [ws[0]] {
            return Err(Error::param(format!(
                "conv1d bias {:?} does not match {} output channels",
                b.shape(),
                ws[0]
            )));
        }
        let bb = b.reshape(&[1, ws[0], 1])?.broadcast_to(&y.shape())?;
        y = y.add(&bb)?;
    }
    unbatch(y, lifted)
}

fn pool_window(x: &Var, kernel: usize, stride: usize, pad: usize) -> Result<Window> {
    let len = *x
        .shape()
        .last()
        .ok_or_else(|| Error::param("pooling a scalar"))?;
    if pad * 2 > kernel {
        return Err(Error::param(format!(
            "pool padding {pad} exceeds half the kernel {kernel}"
        )));
    }
    Window::new(len, kernel, stride, pad).ok_or_else(|| {
        Error::param(format!(
            "pool geometry invalid: L={len} k={kernel} stride={stride} pad={pad}"
        ))
    })
}

/// Max over windows of the last axis. Padding acts as -inf and the gradient
/// goes to the first maximal element of each window.
pub fn max_pool1d(x: &Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
    let geom = pool_window(x, kernel, stride, pad)?;
    let xv = x.value();
    let rows = xv.numel() / geom.in_len;
    let idx = Arc::new(kernels::max_pool_argmax(xv.data(), rows, geom));
    let mut shape = xv.shape().to_vec();
    *shape.last_mut().unwrap() = geom.out_len;
    Ok(gather(x, &idx, &shape))
}

/// Mean over windows of the last axis; padding counts as zeros.
pub fn avg_pool1d(x: &Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
    let geom = pool_window(x, kernel, stride, pad)?;
    Ok(avg_pool_raw(x, geom))
}

/// Average pooling of a plain tensor, outside any graph.
pub fn avg_pool_tensor(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let len = *x
        .shape()
        .last()
        .ok_or_else(|| Error::param("pooling a scalar"))?;
    let geom = Window::new(len, kernel, stride, pad)
        .filter(|_| pad * 2 <= kernel)
        .ok_or_else(|| Error::param(format!("pool geometry invalid: L={len} k={kernel}")))?;
    let rows = x.numel() / len;
    let data = kernels::avg_pool(x.data(), rows, geom);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = geom.out_len;
    Ok(Tensor::from_parts(shape, data))
}

/// `x W^T + b` for `x: [N, F]`, `w: [K, F]`, `b: [K]`.
pub fn linear(x: &Var, w: &Var, b: &Var) -> Result<Var> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.shape() != [ws[0]] {
        return Err(Error::param(format!(
            "linear shapes incompatible: x {xs:?}, w {ws:?}, b {:?}",
            b.shape()
        )));
    }
    let y = x.matmul(&w.transpose()?)?;
    let bb = b.reshape(&[1, ws[0]])?.broadcast_to(&[xs[0], ws[0]])?;
    y.add(&bb)
}

/// Group normalization of `[N, C, L]` (or `[C, L]`) followed by a per-channel affine map.
///
/// With `weights` (`[N, L]`, non-negative), group statistics are weighted
/// averages over positions, so zero-weight positions do not influence them.
pub fn group_norm(
    x: &Var,
    groups: usize,
    gamma: &Var,
    beta: &Var,
    eps: f64,
    weights: Option<&Tensor>,
) -> Result<Var> {
    let (xb, lifted) = as_batched(x)?;
    let s = xb.shape();
    let (n, c, l) = (s[0], s[1], s[2]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::param(format!(
            "{c} channels are not divisible into {groups} groups"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::param(format!(
            "group_norm eps must be positive, got {eps}"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::param(
            "group_norm affine parameters must have one entry per channel",
        ));
    }
    if let Some(wt) = weights {
        if wt.shape() != [n, l] {
            return Err(Error::param(format!(
                "group_norm weights {:?} do not match [{n}, {l}]",
                wt.shape()
            )));
        }
        if wt
            .data()
            .chunks(l)
            .any(|row| !(row.iter().sum::<f64>() > 0.0))
        {
            return Err(Error::Input("group_norm weight row sums to zero".into()));
        }
    }
    let spec = GnSpec {
        groups,
        eps,
        weights: weights.cloned(),
    };
    unbatch(group_norm_raw(&xb, gamma, beta, spec), lifted)
}

/// The group-norm vector-Jacobian product written with differentiable
/// primitives, used when gradients must themselves be differentiated.
/// Returns `(gx, ggamma, gbeta)` for upstream `g`.
pub(crate) fn group_norm_vjp_graph(
    x: &Var,
    gamma: &Var,
    g: &Var,
    spec: &GnSpec,
) -> (Var, Var, Var) {
    let s = x.shape();
    let (n, c, l) = (s[0], s[1], s[2]);
    let groups = spec.groups;
    let per_group = c / groups * l;
    let graph = x.graph();
    let full = [n, groups, per_group];
    let stat = [n, groups, 1];
    let ok = "group-norm shapes are consistent";

    let xr = x.reshape(&full).expect(ok);
    let (centered, var, coef) = match &spec.weights {
        None => {
            let inv_m = 1.0 / per_group as f64;
            let mu = xr.sum_last().scale(inv_m);
            let centered = xr.sub(&mu.broadcast_to(&full).expect(ok)).expect(ok);
            let var = centered.square().sum_last().scale(inv_m);
            (centered, var, graph.constant(Tensor::full(&full, inv_m)))
        }
        Some(wt) => {
            let (wfull, inv_total) = group_weights(wt, groups, c / groups).expect(ok);
            let coef = kernels::broadcast_to(inv_total.data(), inv_total.shape(), &full);
            let coef = Tensor::from_parts(full.to_vec(), coef)
                .zip_map(&wfull, |a, b| a * b)
                .expect(ok);
            let wv = graph.constant(wfull);
            let inv = graph.constant(inv_total).broadcast_to(&stat).expect(ok);
            let mu = xr.mul(&wv).expect(ok).sum_last().mul(&inv).expect(ok);
            let centered = xr.sub(&mu.broadcast_to(&full).expect(ok)).expect(ok);
            let var = centered
                .square()
                .mul(&wv)
                .expect(ok)
                .sum_last()
                .mul(&inv)
                .expect(ok);
            (centered, var, graph.constant(coef))
        }
    };
    let std = var
        .add_scalar(spec.eps)
        .sqrt()
        .broadcast_to(&full)
        .expect(ok);
    let xhat = centered.div(&std).expect(ok);
    let gamma_full = gamma
        .reshape(&[1, c, 1])
        .and_then(|v| v.broadcast_to(&[n, c, l]))
        .and_then(|v| v.reshape(&full))
        .expect(ok);
    let u = g.reshape(&full).and_then(|v| v.mul(&gamma_full)).expect(ok);
    let s1 = u.sum_last().broadcast_to(&full).expect(ok);
    let s2 = u
        .mul(&xhat)
        .expect(ok)
        .sum_last()
        .broadcast_to(&full)
        .expect(ok);
    let inner = s1.add(&xhat.mul(&s2).expect(ok)).expect(ok);
    let gx = u
        .sub(&coef.mul(&inner).expect(ok))
        .and_then(|v| v.div(&std))
        .and_then(|v| v.reshape(&[n, c, l]))
        .expect(ok);
    let xhat = xhat.reshape(&[n, c, l]).expect(ok);
    let ggamma = g
        .mul(&xhat)
        .and_then(|v| v.sum_to(&[1, c, 1]))
        .and_then(|v| v.reshape(&[c]))
        .expect(ok);
    let gbeta = g
        .sum_to(&[1, c, 1])
        .and_then(|v| v.reshape(&[c]))
        .expect(ok);
    (gx, ggamma, gbeta)
}

/// Expand `[N, L]` position weights to `[N, G, (C/G)*L]` plus the reciprocal
/// total weight per sample as `[N, 1, 1]`.
fn group_weights(wt: &Tensor, groups: usize, per: usize) -> Result<(Tensor, Tensor)> {
    let (n, l) = (wt.shape()[0], wt.shape()[1]);
    let mut full = Vec::with_capacity(n * groups * per * l);
    let mut inv = Vec::with_capacity(n);
    for row in wt.data().chunks(l) {
        let total: f64 = row.iter().sum::<f64>() * per as f64;
        if total <= 0.0 {
            return Err(Error::Input("group_norm weight row sums to zero".into()));
        }
        inv.push(1.0 / total);
        for _ in 0..groups * per {
            full.extend_from_slice(row);
        }
    }
    Ok((
        Tensor::from_parts(vec![n, groups, per * l], full),
        Tensor::from_parts(vec![n, 1, 1], inv),
    ))
}
