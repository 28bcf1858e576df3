//! Multi-head scaled dot-product attention with separate Q/K/V/output
//! projections and no dropout.

use crate::error::{HpdpError, Result};

use super::matrix::Matrix;
use super::ops::{linear, linear_backward, softmax_rows, softmax_rows_backward};

/// Borrowed projection weights. Each `w_*` is `D × D`, each `b_*` is `1 × D`.
#[derive(Debug, Clone, Copy)]
pub struct MhaWeights<'a> {
    pub w_q: &'a Matrix,
    pub b_q: &'a Matrix,
    pub w_k: &'a Matrix,
    pub b_k: &'a Matrix,
    pub w_v: &'a Matrix,
    pub b_v: &'a Matrix,
    pub w_o: &'a Matrix,
    pub b_o: &'a Matrix,
}

/// Gradients for every array in [`MhaWeights`], same order.
#[derive(Debug, Clone)]
pub struct MhaGrads {
    pub w_q: Matrix,
    pub b_q: Matrix,
    pub w_k: Matrix,
    pub b_k: Matrix,
    pub w_v: Matrix,
    pub b_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention probabilities, one `Lq × Lk` matrix per head.
    pub probs: Vec<Matrix>,
    heads: Matrix,
    n_heads: usize,
}

fn head_dim(d: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(HpdpError::Config(format!(
            "model width {d} is not divisible by {n_heads} attention heads"
        )));
    }
    Ok(d / n_heads)
}

/// `MHA(query, key, value)`: output has the query's row count and width D.
pub fn multi_head_attention(
    query: &Matrix,
    key: &Matrix,
    value: &Matrix,
    w: MhaWeights<'_>,
    n_heads: usize,
) -> Result<(Matrix, MhaCache)> {
    let d = w.w_q.cols();
    let dh = head_dim(d, n_heads)?;
    if key.rows() != value.rows() {
        return Err(HpdpError::shape(
            "multi_head_attention",
            format!("{} keys but {} values", key.rows(), value.rows()),
        ));
    }
    let q = linear(query, w.w_q, w.b_q)?;
    let k = linear(key, w.w_k, w.b_k)?;
    let v = linear(value, w.w_v, w.b_v)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut heads = Matrix::zeros(query.rows(), d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.cols_range(lo, hi);
        let kh = k.cols_range(lo, hi);
        let vh = v.cols_range(lo, hi);
        let scores = qh.matmul_nt(&kh)?.scale(scale);
        let p = softmax_rows(&scores, 1.0)?;
        heads.set_cols(lo, &p.matmul(&vh)?);
        probs.push(p);
    }
    let out = linear(&heads, w.w_o, w.b_o)?;
    Ok((
        out,
        MhaCache {
            q,
            k,
            v,
            probs,
            heads,
            n_heads,
        },
    ))
}

/// VJP of [`multi_head_attention`]: `(dquery, dkey, dvalue, weight grads)`.
pub fn multi_head_attention_backward(
    query: &Matrix,
    key: &Matrix,
    value: &Matrix,
    w: MhaWeights<'_>,
    cache: &MhaCache,
    dout: &Matrix,
) -> Result<(Matrix, Matrix, Matrix, MhaGrads)> {
    let d = w.w_q.cols();
    let dh = d / cache.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (dheads, dw_o, db_o) = linear_backward(&cache.heads, w.w_o, dout)?;
    let mut dq = Matrix::zeros(cache.q.rows(), d);
    let mut dk = Matrix::zeros(cache.k.rows(), d);
    let mut dv = Matrix::zeros(cache.v.rows(), d);
    for (h, p) in cache.probs.iter().enumerate() {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = cache.q.cols_range(lo, hi);
        let kh = cache.k.cols_range(lo, hi);
        let vh = cache.v.cols_range(lo, hi);
        let doh = dheads.cols_range(lo, hi);
        let dp = doh.matmul_nt(&vh)?;
        dv.set_cols(lo, &p.matmul_tn(&doh)?);
        let dscores = softmax_rows_backward(p, &dp, 1.0).scale(scale);
        dq.set_cols(lo, &dscores.matmul(&kh)?);
        dk.set_cols(lo, &dscores.matmul_tn(&qh)?);
    }
    let (dquery, dw_q, db_q) = linear_backward(query, w.w_q, &dq)?;
    let (dkey, dw_k, db_k) = linear_backward(key, w.w_k, &dk)?;
    let (dvalue, dw_v, db_v) = linear_backward(value, w.w_v, &dv)?;
    Ok((
        dquery,
        dkey,
        dvalue,
        MhaGrads {
            w_q: dw_q,
            b_q: db_q,
            w_k: dw_k,
            b_k: db_k,
            w_v: dw_v,
            b_v: db_v,
            w_o: dw_o,
            b_o: db_o,
        },
    ))
}
