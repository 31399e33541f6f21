//! Raw compute kernels over flat row-major buffers.
//!
//! Nothing in here knows about the graph; shapes are validated by the
//! callers in `ops`. Every reduction runs in a fixed order so results are
//! bit-reproducible.

/// Geometry of a strided 1D window op over the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl Window {
    /// Output length, or `None` when no full window fits.
    pub fn new(in_len: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if kernel == 0 || stride == 0 || in_len + 2 * pad < kernel {
            return None;
        }
        let out_len = (in_len + 2 * pad - kernel) / stride + 1;
        Some(Self {
            kernel,
            stride,
            pad,
            in_len,
            out_len,
        })
    }
}

/// Zero-padded row split into `stride` phases: `phase[r][j] = padded[j*s + r]`.
struct Phases {
    stride: usize,
    len: usize,
    buf: Vec<f64>,
}

impl Phases {
    fn new(g: &Window) -> Self {
        let padded = g.in_len + 2 * g.pad;
        let len = padded.div_ceil(g.stride);
        Self {
            stride: g.stride,
            len,
            buf: vec![0.0; len * g.stride],
        }
    }

    fn load(&mut self, row: &[f64], pad: usize) {
        self.buf.fill(0.0);
        for r in 0..self.stride {
            let dst = &mut self.buf[r * self.len..][..self.len];
            // padded index j*s + r maps to row index j*s + r - pad
            let j0 = pad.saturating_sub(r).div_ceil(self.stride);
            let first = j0 * self.stride + r - pad;
            for (d, &v) in dst[j0..]
                .iter_mut()
                .zip(row[first.min(row.len())..].iter().step_by(self.stride))
            {
                *d = v;
            }
        }
    }

    fn store(&self, row: &mut [f64], pad: usize) {
        for r in 0..self.stride {
            let src = &self.buf[r * self.len..][..self.len];
            let j0 = pad.saturating_sub(r).div_ceil(self.stride);
            let first = j0 * self.stride + r - pad;
            let len = row.len();
            for (d, &v) in row[first.min(len)..]
                .iter_mut()
                .step_by(self.stride)
                .zip(&src[j0..])
            {
                *d = v;
            }
        }
    }

    /// Window `[k/s, k/s + n)` of phase `k % s`, i.e. `padded[t*s + k]` for `t < n`.
    #[inline]
    fn tap(&self, k: usize, n: usize) -> &[f64] {
        &self.buf[(k % self.stride) * self.len + k / self.stride..][..n]
    }

    #[inline]
    fn tap_mut(&mut self, k: usize, n: usize) -> &mut [f64] {
        &mut self.buf[(k % self.stride) * self.len + k / self.stride..][..n]
    }
}

/// Dot product with four interleaved accumulators, combined in a fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// y[n, co, t] = sum_{ci, k} w[co, ci, k] * x[n, ci, t*s + k - p]
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    batch: usize,
    c_in: usize,
    c_out: usize,
    g: Window,
) -> Vec<f64> {
    let (l, lo_len, kk) = (g.in_len, g.out_len, g.kernel);
    let mut y = vec![0.0; batch * c_out * lo_len];
    let mut ph = Phases::new(&g);
    for n in 0..batch {
        for ci in 0..c_in {
            ph.load(&x[(n * c_in + ci) * l..][..l], g.pad);
            for co in 0..c_out {
                let row = &mut y[(n * c_out + co) * lo_len..][..lo_len];
                let wr = &w[(co * c_in + ci) * kk..][..kk];
                for (k, &wv) in wr.iter().enumerate() {
                    axpy(row, wv, ph.tap(k, lo_len));
                }
            }
        }
    }
    y
}

/// Adjoint of `conv1d` with respect to its input:
/// gx[n, ci, t*s + k - p] += w[co, ci, k] * gy[n, co, t]
pub fn conv1d_transpose(
    gy: &[f64],
    w: &[f64],
    batch: usize,
    c_in: usize,
    c_out: usize,
    g: Window,
) -> Vec<f64> {
    let (l, lo_len, kk) = (g.in_len, g.out_len, g.kernel);
    let mut gx = vec![0.0; batch * c_in * l];
    let mut ph = Phases::new(&g);
    for n in 0..batch {
        for ci in 0..c_in {
            ph.buf.fill(0.0);
            for co in 0..c_out {
                let gr = &gy[(n * c_out + co) * lo_len..][..lo_len];
                let wr = &w[(co * c_in + ci) * kk..][..kk];
                for (k, &wv) in wr.iter().enumerate() {
                    axpy(ph.tap_mut(k, lo_len), wv, gr);
                }
            }
            ph.store(&mut gx[(n * c_in + ci) * l..][..l], g.pad);
        }
    }
    gx
}

/// Adjoint of `conv1d` with respect to its weights:
/// gw[co, ci, k] = sum_{n, t} x[n, ci, t*s + k - p] * gy[n, co, t]
pub fn conv1d_weight_grad(
    x: &[f64],
    gy: &[f64],
    batch: usize,
    c_in: usize,
    c_out: usize,
    g: Window,
) -> Vec<f64> {
    let (l, lo_len, kk) = (g.in_len, g.out_len, g.kernel);
    let mut gw = vec![0.0; c_out * c_in * kk];
    let mut ph = Phases::new(&g);
    for n in 0..batch {
        for ci in 0..c_in {
            ph.load(&x[(n * c_in + ci) * l..][..l], g.pad);
            for co in 0..c_out {
                let gr = &gy[(n * c_out + co) * lo_len..][..lo_len];
                let out = &mut gw[(co * c_in + ci) * kk..][..kk];
                for (k, acc) in out.iter_mut().enumerate() {
                    *acc += dot(gr, ph.tap(k, lo_len));
                }
            }
        }
    }
    gw
}

/// Layout of a group-norm input `[N, C, L]` split into `groups` channel groups.
#[derive(Debug, Clone, Copy)]
pub struct GroupLayout {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub groups: usize,
}

impl GroupLayout {
    fn per(&self) -> usize {
        self.channels / self.groups
    }
}

/// Per `(n, group)` mean and reciprocal standard deviation. With position
/// weights `w: [N, L]` both moments are weighted averages.
pub fn group_norm_stats(
    x: &[f64],
    lay: GroupLayout,
    eps: f64,
    w: Option<&[f64]>,
) -> Vec<(f64, f64)> {
    let (l, per) = (lay.len, lay.per());
    let mut out = Vec::with_capacity(lay.batch * lay.groups);
    for n in 0..lay.batch {
        let wr = w.map(|w| &w[n * l..][..l]);
        let total = match wr {
            Some(wr) => wr.iter().sum::<f64>() * per as f64,
            None => (per * l) as f64,
        };
        for grp in 0..lay.groups {
            let block = &x[(n * lay.channels + grp * per) * l..][..per * l];
            let mut s = 0.0;
            for row in block.chunks_exact(l) {
                s += match wr {
                    Some(wr) => dot(row, wr),
                    None => row.iter().sum::<f64>(),
                };
            }
            let mu = s / total;
            let mut v = 0.0;
            for row in block.chunks_exact(l) {
                match wr {
                    Some(wr) => {
                        for (a, b) in row.iter().zip(wr) {
                            v += b * (a - mu) * (a - mu);
                        }
                    }
                    None => {
                        for a in row {
                            v += (a - mu) * (a - mu);
                        }
                    }
                }
            }
            out.push((mu, 1.0 / (v / total + eps).sqrt()));
        }
    }
    out
}

/// y = gamma_c (x - mu) rstd + beta_c
pub fn group_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    lay: GroupLayout,
    stats: &[(f64, f64)],
) -> Vec<f64> {
    let (l, per) = (lay.len, lay.per());
    let mut y = vec![0.0; x.len()];
    for n in 0..lay.batch {
        for c in 0..lay.channels {
            let (mu, rstd) = stats[n * lay.groups + c / per];
            let (a, b) = (gamma[c] * rstd, beta[c]);
            let off = (n * lay.channels + c) * l;
            for (yv, xv) in y[off..off + l].iter_mut().zip(&x[off..off + l]) {
                *yv = a * (xv - mu) + b;
            }
        }
    }
    y
}

/// Gradients of `group_norm` for upstream `gy`: `(gx, ggamma, gbeta)`.
///
/// With xhat = (x - mu) rstd and u = gamma gy:
/// gx_i = rstd (u_i - (w_i / W) (sum_j u_j + xhat_i sum_j u_j xhat_j)).
pub fn group_norm_backward(
    x: &[f64],
    gamma: &[f64],
    gy: &[f64],
    lay: GroupLayout,
    eps: f64,
    w: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (l, per) = (lay.len, lay.per());
    let stats = group_norm_stats(x, lay, eps, w);
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; lay.channels];
    let mut gb = vec![0.0; lay.channels];
    let mut xhat = vec![0.0; per * l];
    for n in 0..lay.batch {
        let wr = w.map(|w| &w[n * l..][..l]);
        let total = match wr {
            Some(wr) => wr.iter().sum::<f64>() * per as f64,
            None => (per * l) as f64,
        };
        for grp in 0..lay.groups {
            let (mu, rstd) = stats[n * lay.groups + grp];
            let base = (n * lay.channels + grp * per) * l;
            let (mut s1, mut s2) = (0.0, 0.0);
            for j in 0..per {
                let c = grp * per + j;
                let xr = &x[base + j * l..][..l];
                let gr = &gy[base + j * l..][..l];
                let hr = &mut xhat[j * l..][..l];
                let (mut sg, mut sgx) = (0.0, 0.0);
                for ((h, xv), gv) in hr.iter_mut().zip(xr).zip(gr) {
                    *h = (xv - mu) * rstd;
                    sg += gv;
                    sgx += gv * *h;
                }
                gb[c] += sg;
                gg[c] += sgx;
                s1 += gamma[c] * sg;
                s2 += gamma[c] * sgx;
            }
            for j in 0..per {
                let c = grp * per + j;
                let gr = &gy[base + j * l..][..l];
                let hr = &xhat[j * l..][..l];
                let out = &mut gx[base + j * l..][..l];
                for t in 0..l {
                    let coef = match wr {
                        Some(wr) => wr[t] / total,
                        None => 1.0 / total,
                    };
                    out[t] = rstd * (gamma[c] * gr[t] - coef * (s1 + hr[t] * s2));
                }
            }
        }
    }
    (gx, gg, gb)
}

/// Flat source index of the maximum of every pooling window over `rows`
/// independent rows. Padding counts as -inf; ties go to the lowest index and
/// NaN wins.
pub fn max_pool_argmax(x: &[f64], rows: usize, g: Window) -> Vec<usize> {
    let mut idx = Vec::with_capacity(rows * g.out_len);
    for r in 0..rows {
        let xr = &x[r * g.in_len..][..g.in_len];
        for t in 0..g.out_len {
            let start = (t * g.stride) as isize - g.pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + g.kernel as isize) as usize).min(g.in_len);
            let mut best = lo;
            for i in lo + 1..hi {
                if xr[i] > xr[best] || (xr[i].is_nan() && !xr[best].is_nan()) {
                    best = i;
                }
            }
            idx.push(r * g.in_len + best);
        }
    }
    idx
}

pub fn gather(x: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| x[i]).collect()
}

pub fn scatter_add(g: &[f64], idx: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (&i, &v) in idx.iter().zip(g) {
        out[i] += v;
    }
    out
}

/// Window mean with zero padding (padding counts toward the divisor).
pub fn avg_pool(x: &[f64], rows: usize, g: Window) -> Vec<f64> {
    let inv = 1.0 / g.kernel as f64;
    let mut y = Vec::with_capacity(rows * g.out_len);
    for r in 0..rows {
        let xr = &x[r * g.in_len..][..g.in_len];
        for t in 0..g.out_len {
            let start = (t * g.stride) as isize - g.pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + g.kernel as isize) as usize).min(g.in_len);
            let s: f64 = xr[lo..hi].iter().sum();
            y.push(s * inv);
        }
    }
    y
}

/// Adjoint of `avg_pool`.
pub fn avg_pool_transpose(gy: &[f64], rows: usize, g: Window) -> Vec<f64> {
    let inv = 1.0 / g.kernel as f64;
    let mut gx = vec![0.0; rows * g.in_len];
    for r in 0..rows {
        let row = &mut gx[r * g.in_len..][..g.in_len];
        for t in 0..g.out_len {
            let v = gy[r * g.out_len + t] * inv;
            let start = (t * g.stride) as isize - g.pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + g.kernel as isize) as usize).min(g.in_len);
            for e in &mut row[lo..hi] {
                *e += v;
            }
        }
    }
    gx
}

/// [m, k] x [k, n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..][..n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Broadcast `src` (same rank as `dst_shape`, every extent 1 or equal) up to `dst_shape`.
pub fn broadcast_to(src: &[f64], src_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    let numel: usize = dst_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let rank = dst_shape.len();
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let strides = broadcast_strides(src_shape);
    let last = rank - 1;
    let row_len = dst_shape[last];
    let mut counter = vec![0usize; last];
    loop {
        let base: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        if src_shape[last] == 1 {
            out.extend(std::iter::repeat(src[base]).take(row_len));
        } else {
            out.extend_from_slice(&src[base..base + row_len]);
        }
        if !advance(&mut counter, &dst_shape[..last]) {
            break;
        }
    }
    out
}

/// Sum `src` (shape `src_shape`) down to `dst_shape`, the adjoint of `broadcast_to`.
pub fn sum_to(src: &[f64], src_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    let numel: usize = dst_shape.iter().product();
    let mut out = vec![0.0; numel];
    let rank = src_shape.len();
    if rank == 0 {
        out[0] = src[0];
        return out;
    }
    let strides = broadcast_strides(dst_shape);
    let last = rank - 1;
    let row_len = src_shape[last];
    let mut counter = vec![0usize; last];
    let mut offset = 0;
    loop {
        let base: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        let row = &src[offset..offset + row_len];
        if dst_shape[last] == 1 {
            out[base] += row.iter().sum::<f64>();
        } else {
            for (o, v) in out[base..base + row_len].iter_mut().zip(row) {
                *o += v;
            }
        }
        offset += row_len;
        if !advance(&mut counter, &src_shape[..last]) {
            break;
        }
    }
    out
}

/// Row-major strides with 0 for extent-1 axes (all but the last axis).
fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![0; rank.saturating_sub(1)];
    let mut acc = shape[rank - 1];
    for ax in (0..rank - 1).rev() {
        strides[ax] = if shape[ax] == 1 { 0 } else { acc };
        acc *= shape[ax];
    }
    strides
}

fn advance(counter: &mut [usize], extents: &[usize]) -> bool {
    for ax in (0..counter.len()).rev() {
        counter[ax] += 1;
        if counter[ax] < extents[ax] {
            return true;
        }
        counter[ax] = 0;
    }
    false
}
