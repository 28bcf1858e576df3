//! Row-wise kernels and their vector-Jacobian products.
//!
//! Every forward kernel here has a `*_backward` twin taking the upstream
//! gradient and whatever the forward pass cached. The finite-difference
//! harness in [`super::gradcheck`] checks each pair.

use crate::error::{HpdpError, Result};

use super::matrix::{dot, norm, Matrix};

/// Added to row norms before dividing in cosine similarity.
pub const NORM_GUARD: f64 = 1e-12;

/// Row-wise `softmax(m / temperature)`, max-subtracted.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(HpdpError::Config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut out = m.scale(1.0 / temperature);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// VJP of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix, temperature: f64) -> Matrix {
    let mut dm = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let inner = dot(yr, dyr);
        for ((o, &yv), &g) in dm.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - inner) / temperature;
        }
    }
    dm
}

/// Cached statistics of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization with population variance, then `x̂ ⊙ gain + bias`.
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(HpdpError::shape(
            "layer_norm",
            format!(
                "input has {d} features, gain {:?}, bias {:?}",
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    if !(eps > 0.0) {
        return Err(HpdpError::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let xh = (row[c] - mean) * inv;
            normalized[(r, c)] = xh;
            out[(r, c)] = xh * gain[(0, c)] + bias[(0, c)];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Gradients of [`layer_norm`]: `(dx, dgain, dbias)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gain: &Matrix, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (rows, d) = dy.shape();
    let mut dx = Matrix::zeros(rows, d);
    let mut dgain = Matrix::zeros(1, d);
    let dbias = dy.col_sum();
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = cache.normalized.row(r);
        let g = dy.row(r);
        for c in 0..d {
            dgain[(0, c)] += g[c] * xh[c];
            dxhat[c] = g[c] * gain[(0, c)];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xh = dot(&dxhat, xh) / d as f64;
        let inv = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xh);
        }
    }
    (dx, dgain, dbias)
}

fn unit_rows(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        norms.push(n);
        let denom = n.max(NORM_GUARD);
        for v in out.row_mut(r) {
            *v /= denom;
        }
    }
    (out, norms)
}

/// Pairwise cosine similarities between the rows of `a` (N×D) and `b` (K×D).
///
/// Norms are floored at `1e-12` so zero rows map to similarity 0.
pub fn cosine_sim_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(HpdpError::shape(
            "cosine_sim_matrix",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (ua, _) = unit_rows(a);
    let (ub, _) = unit_rows(b);
    ua.matmul_nt(&ub)
}

// d(x / max(‖x‖, g)) pulled back through `du`.
fn unit_row_backward(x: &[f64], n: f64, du: &[f64], out: &mut [f64]) {
    let denom = n.max(NORM_GUARD);
    let proj = if n > NORM_GUARD { dot(x, du) / (n * n * n) } else { 0.0 };
    for ((o, &xv), &g) in out.iter_mut().zip(x).zip(du) {
        *o += g / denom - xv * proj;
    }
}

/// VJP of [`cosine_sim_matrix`]: `(da, db)`.
pub fn cosine_sim_backward(a: &Matrix, b: &Matrix, dc: &Matrix) -> Result<(Matrix, Matrix)> {
    let (ua, na) = unit_rows(a);
    let (ub, nb) = unit_rows(b);
    let dua = dc.matmul(&ub)?;
    let dub = dc.matmul_tn(&ua)?;
    let mut da = Matrix::zeros(a.rows(), a.cols());
    let mut db = Matrix::zeros(b.rows(), b.cols());
    for r in 0..a.rows() {
        unit_row_backward(a.row(r), na[r], dua.row(r), da.row_mut(r));
    }
    for r in 0..b.rows() {
        unit_row_backward(b.row(r), nb[r], dub.row(r), db.row_mut(r));
    }
    Ok((da, db))
}

/// `x · w + b`, with `b` a `1 × out` row broadcast over rows.
pub fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    x.matmul(w)?.add_row_broadcast(b)
}

/// Gradients of [`linear`]: `(dx, dw, db)`.
pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    Ok((dy.matmul_nt(w)?, x.matmul_tn(dy)?, dy.col_sum()))
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(pre: &Matrix, dy: &Matrix) -> Matrix {
    let mut out = dy.clone();
    for (o, &p) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if p <= 0.0 {
            *o = 0.0;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(pre: &Matrix, dy: &Matrix) -> Matrix {
    let mut out = dy.clone();
    for (o, &v) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        let inner = GELU_C * (v + 0.044715 * v * v * v);
        let t = inner.tanh();
        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        *o *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
    }
    out
}
