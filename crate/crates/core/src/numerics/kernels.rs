use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-9;

/// `y[n×m] = x[n×k] · w[k×m]`.
pub fn matmul(x: &[f64], n: usize, k: usize, w: &[f64], m: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * m];
    matmul_acc(&mut y, x, n, k, w, m);
    y
}

/// `y[n×m] += x[n×k] · w[k×m]`.
pub fn matmul_acc(y: &mut [f64], x: &[f64], n: usize, k: usize, w: &[f64], m: usize) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    for (yr, xr) in y.chunks_exact_mut(m).zip(x.chunks_exact(k)) {
        for (xv, wr) in xr.iter().zip(w.chunks_exact(m)) {
            if *xv == 0.0 {
                continue;
            }
            for (a, b) in yr.iter_mut().zip(wr) {
                *a += xv * b;
            }
        }
    }
}

/// `dx[n×k] += dy[n×m] · wᵀ` for `w` of shape k×m.
pub fn matmul_bt_acc(dx: &mut [f64], dy: &[f64], n: usize, m: usize, w: &[f64], k: usize) {
    debug_assert_eq!(dy.len(), n * m);
    debug_assert_eq!(w.len(), k * m);
    for (dxr, dyr) in dx.chunks_exact_mut(k).zip(dy.chunks_exact(m)) {
        for (d, wr) in dxr.iter_mut().zip(w.chunks_exact(m)) {
            *d += dot(dyr, wr);
        }
    }
}

/// `dw[k×m] += xᵀ · dy` for `x` n×k and `dy` n×m.
pub fn matmul_at_acc(dw: &mut [f64], x: &[f64], n: usize, k: usize, dy: &[f64], m: usize) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(dy.len(), n * m);
    for (xr, dyr) in x.chunks_exact(k).zip(dy.chunks_exact(m)) {
        for (xv, dwr) in xr.iter().zip(dw.chunks_exact_mut(m)) {
            if *xv == 0.0 {
                continue;
            }
            for (a, b) in dwr.iter_mut().zip(dyr) {
                *a += xv * b;
            }
        }
    }
}

pub fn add_bias(y: &mut [f64], b: &[f64]) {
    for row in y.chunks_exact_mut(b.len()) {
        for (a, bv) in row.iter_mut().zip(b) {
            *a += bv;
        }
    }
}

/// `db += Σ_rows dy`.
pub fn bias_grad_acc(db: &mut [f64], dy: &[f64]) {
    for row in dy.chunks_exact(db.len()) {
        for (a, d) in db.iter_mut().zip(row) {
            *a += d;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Saved statistics of a row-wise layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Row-wise `(x - mean) / sqrt(var + eps) · gamma + beta` over `n` rows of `d`.
pub fn layernorm_rows(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / libm::sqrt(var + LN_EPS);
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gamma[c] + beta[c];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Accumulates the layer-norm input gradient into `dx`, and the affine
/// gradients into `dgamma`/`dbeta` when given.
pub fn layernorm_rows_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    gamma: &[f64],
    dx: &mut [f64],
    mut dgamma: Option<&mut [f64]>,
    mut dbeta: Option<&mut [f64]>,
) {
    let d = gamma.len();
    let n = cache.rstd.len();
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        if let Some(dg) = dgamma.as_deref_mut() {
            for c in 0..d {
                dg[c] += dyr[c] * xh[c];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for c in 0..d {
                db[c] += dyr[c];
            }
        }
        for c in 0..d {
            dxhat[c] = dyr[c] * gamma[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] += rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
}

/// In-place row softmax over rows of length `d`.
pub fn softmax_rows(x: &mut [f64], d: usize) {
    for row in x.chunks_exact_mut(d) {
        softmax_in_place(row);
    }
}

/// Softmax of one row; entries equal to `-inf` receive zero weight.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY {
            0.0
        } else {
            libm::exp(*v - max)
        };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient through a softmax row: `dx = y ⊙ (dy − Σ dy⊙y)`.
pub fn softmax_backward_row(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let s = dot(y, dy);
    for ((d, yv), g) in dx.iter_mut().zip(y).zip(dy) {
        *d = yv * (g - s);
    }
}

const INV_SQRT2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Unit-L2 normalization; returns the normalized vector and the input norm.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = libm::sqrt(dot(x, x));
    let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    (x.iter().map(|v| v * inv).collect(), norm)
}

/// Gradient of `x / ‖x‖` given the normalized output `y` and `‖x‖`.
pub fn l2_normalize_backward(dy: &[f64], y: &[f64], norm: f64) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; y.len()];
    }
    let s = dot(y, dy);
    dy.iter()
        .zip(y)
        .map(|(g, yv)| (g - yv * s) / norm)
        .collect()
}

/// Shape of a multi-head attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub heads: usize,
    pub head_dim: usize,
    /// Number of key/value rows.
    pub keys: usize,
    /// Keys at positions `>= valid_len` are masked out.
    pub valid_len: usize,
    pub causal: bool,
}

impl AttentionShape {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn key_limit(&self, query_pos: usize) -> usize {
        if self.causal {
            (query_pos + 1).min(self.valid_len)
        } else {
            self.valid_len
        }
    }
}

/// Scaled dot-product attention for query rows at `query_pos` (positions
/// within the key sequence). Returns the head-concatenated output
/// (`query_pos.len()` × D) and the attention weights (heads × queries × keys).
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    query_pos: &[usize],
    shape: &AttentionShape,
) -> (Vec<f64>, Vec<f64>) {
    let d = shape.model_dim();
    let dh = shape.head_dim;
    let nq = query_pos.len();
    let nk = shape.keys;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut out = vec![0.0; nq * d];
    let mut probs = vec![0.0; shape.heads * nq * nk];
    for h in 0..shape.heads {
        let off = h * dh;
        for (qi, &pos) in query_pos.iter().enumerate() {
            let qrow = &q[qi * d + off..qi * d + off + dh];
            let p = &mut probs[(h * nq + qi) * nk..(h * nq + qi + 1) * nk];
            let limit = shape.key_limit(pos);
            for j in 0..nk {
                p[j] = if j < limit {
                    dot(qrow, &k[j * d + off..j * d + off + dh]) * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            softmax_in_place(p);
            let orow = &mut out[qi * d + off..qi * d + off + dh];
            for j in 0..limit {
                let w = p[j];
                for (o, vv) in orow.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                    *o += w * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention`]; accumulates into `dq` (queries × D) and
/// `dk`, `dv` (keys × D).
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    query_pos: &[usize],
    shape: &AttentionShape,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let d = shape.model_dim();
    let dh = shape.head_dim;
    let nq = query_pos.len();
    let nk = shape.keys;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut dp = vec![0.0; nk];
    let mut ds = vec![0.0; nk];
    for h in 0..shape.heads {
        let off = h * dh;
        for (qi, &pos) in query_pos.iter().enumerate() {
            let p = &probs[(h * nq + qi) * nk..(h * nq + qi + 1) * nk];
            let dorow = &dout[qi * d + off..qi * d + off + dh];
            let limit = shape.key_limit(pos);
            for j in 0..limit {
                dp[j] = dot(dorow, &v[j * d + off..j * d + off + dh]);
                let dvrow = &mut dv[j * d + off..j * d + off + dh];
                for (a, g) in dvrow.iter_mut().zip(dorow) {
                    *a += p[j] * g;
                }
            }
            softmax_backward_row(&p[..limit], &dp[..limit], &mut ds[..limit]);
            let qrow = &q[qi * d + off..qi * d + off + dh];
            let dqrow_start = qi * d + off;
            for j in 0..limit {
                let g = ds[j] * scale;
                if g == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[dqrow_start + c] += g * k[j * d + off + c];
                    dk[j * d + off + c] += g * qrow[c];
                }
            }
        }
    }
}

// Tensor-level wrappers over the slice kernels.

/// `y = x·W + b` for `x` n×in, `W` in×out, `b` of length out.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = x.dims2()?;
    let (k2, m) = w.dims2()?;
    if k != k2 || b.len() != m {
        return Err(Error::Shape(format!(
            "linear: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = matmul(x.data(), n, k, w.data(), m);
    add_bias(&mut y, b.data());
    Tensor::new(&[n, m], y)
}

/// Gradients `(dx, dW, db)` of [`linear`] for upstream gradient `dy`.
pub fn linear_backward(dy: &Tensor, x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, k) = x.dims2()?;
    let (k2, m) = w.dims2()?;
    if k != k2 || dy.shape() != [n, m] {
        return Err(Error::Shape(format!(
            "linear_backward: dy {:?}, x {:?}, W {:?}",
            dy.shape(),
            x.shape(),
            w.shape()
        )));
    }
    let mut dx = vec![0.0; n * k];
    matmul_bt_acc(&mut dx, dy.data(), n, m, w.data(), k);
    let mut dw = vec![0.0; k * m];
    matmul_at_acc(&mut dw, x.data(), n, k, dy.data(), m);
    let mut db = vec![0.0; m];
    bias_grad_acc(&mut db, dy.data());
    Ok((
        Tensor::new(&[n, k], dx)?,
        Tensor::new(&[k, m], dw)?,
        Tensor::new(&[m], db)?,
    ))
}

/// Row-wise layer norm of a matrix with unit gain and zero bias.
pub fn layernorm(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let (y, _) = layernorm_rows(x.data(), d, &vec![1.0; d], &vec![0.0; d]);
    Tensor::new(&[n, d], y)
}

/// Row-wise softmax of a matrix.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut y = x.data().to_vec();
    softmax_rows(&mut y, d);
    Tensor::new(&[n, d], y)
}
