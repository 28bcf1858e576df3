//! Text-conditioned alignment of aggregated prototypes.
//!
//! Stage one generates a per-channel scale `γ` and shift `β` from the text
//! embedding and applies them residually, `LN(M + γ ⊙ M + β)`. Stage two
//! lets the original prototypes query the modulated ones with multi-head
//! attention, `LN(M + MHA(M, H_mod, H_mod))`.

use crate::error::{HpdpError, Result};
use crate::numerics::{
    layer_norm, layer_norm_backward, linear, linear_backward, multi_head_attention, multi_head_attention_backward,
    relu, relu_backward, LayerNormCache, Matrix, MhaCache, MhaGrads, MhaWeights,
};

pub const DEFAULT_N_HEADS: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One hidden ReLU layer of width D followed by separate γ and β heads.
#[derive(Debug, Clone, Copy)]
pub struct FilmGenerator<'a> {
    pub w_hidden: &'a Matrix,
    pub b_hidden: &'a Matrix,
    pub w_gamma: &'a Matrix,
    pub b_gamma: &'a Matrix,
    pub w_beta: &'a Matrix,
    pub b_beta: &'a Matrix,
}

/// Per-channel scale and shift, each `1 × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

#[derive(Debug, Clone)]
pub struct FilmCache {
    pre_hidden: Matrix,
    hidden: Matrix,
}

#[derive(Debug, Clone)]
pub struct FilmGrads {
    pub w_hidden: Matrix,
    pub b_hidden: Matrix,
    pub w_gamma: Matrix,
    pub b_gamma: Matrix,
    pub w_beta: Matrix,
    pub b_beta: Matrix,
    pub d_text: Matrix,
}

/// Learnable affine of one layer-norm application.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormAffine<'a> {
    pub gain: &'a Matrix,
    pub bias: &'a Matrix,
    pub eps: f64,
}

pub fn generate_film_params(text: &Matrix, gen: &FilmGenerator<'_>) -> Result<(FilmParams, FilmCache)> {
    if text.rows() != 1 {
        return Err(HpdpError::shape(
            "generate_film_params",
            format!("text embedding must be a single row, got {:?}", text.shape()),
        ));
    }
    let pre_hidden = linear(text, gen.w_hidden, gen.b_hidden)?;
    let hidden = relu(&pre_hidden);
    let gamma = linear(&hidden, gen.w_gamma, gen.b_gamma)?;
    let beta = linear(&hidden, gen.w_beta, gen.b_beta)?;
    Ok((FilmParams { gamma, beta }, FilmCache { pre_hidden, hidden }))
}

pub fn generate_film_params_backward(
    text: &Matrix,
    gen: &FilmGenerator<'_>,
    cache: &FilmCache,
    d_gamma: &Matrix,
    d_beta: &Matrix,
) -> Result<FilmGrads> {
    let (dh_g, w_gamma, b_gamma) = linear_backward(&cache.hidden, gen.w_gamma, d_gamma)?;
    let (dh_b, w_beta, b_beta) = linear_backward(&cache.hidden, gen.w_beta, d_beta)?;
    let d_hidden = dh_g.add(&dh_b)?;
    let d_pre = relu_backward(&cache.pre_hidden, &d_hidden);
    let (d_text, w_hidden, b_hidden) = linear_backward(text, gen.w_hidden, &d_pre)?;
    Ok(FilmGrads {
        w_hidden,
        b_hidden,
        w_gamma,
        b_gamma,
        w_beta,
        b_beta,
        d_text,
    })
}

#[derive(Debug, Clone)]
pub struct ModulateCache {
    ln: LayerNormCache,
}

/// `LN(M + (γ ⊙ M + β))`, γ and β broadcast over the prototype rows.
pub fn modulate(m: &Matrix, film: &FilmParams, ln: LayerNormAffine<'_>) -> Result<(Matrix, ModulateCache)> {
    let d = m.cols();
    if film.gamma.shape() != (1, d) || film.beta.shape() != (1, d) {
        return Err(HpdpError::shape(
            "modulate",
            format!(
                "prototypes {:?}, gamma {:?}, beta {:?}",
                m.shape(),
                film.gamma.shape(),
                film.beta.shape()
            ),
        ));
    }
    let mut pre = m.clone();
    for r in 0..pre.rows() {
        for (c, v) in pre.row_mut(r).iter_mut().enumerate() {
            *v = *v * (1.0 + film.gamma[(0, c)]) + film.beta[(0, c)];
        }
    }
    let (out, cache) = layer_norm(&pre, ln.gain, ln.bias, ln.eps)?;
    Ok((out, ModulateCache { ln: cache }))
}

/// Gradients of [`modulate`]: `(dM, dγ, dβ, dgain, dbias)`.
pub fn modulate_backward(
    m: &Matrix,
    film: &FilmParams,
    ln: LayerNormAffine<'_>,
    cache: &ModulateCache,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix, Matrix, Matrix)> {
    let (d_pre, d_gain, d_bias) = layer_norm_backward(&cache.ln, ln.gain, d_out);
    let mut d_m = d_pre.clone();
    let mut d_gamma = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            d_m[(r, c)] *= 1.0 + film.gamma[(0, c)];
            d_gamma[(0, c)] += d_pre[(r, c)] * m[(r, c)];
        }
    }
    let d_beta = d_pre.col_sum();
    Ok((d_m, d_gamma, d_beta, d_gain, d_bias))
}

#[derive(Debug, Clone)]
pub struct PropagateCache {
    pub mha: MhaCache,
    ln: LayerNormCache,
}

/// `LN(M + MHA(M, H_mod, H_mod))`.
pub fn propagate(
    m: &Matrix,
    h_mod: &Matrix,
    mha: MhaWeights<'_>,
    n_heads: usize,
    ln: LayerNormAffine<'_>,
) -> Result<(Matrix, PropagateCache)> {
    let (att, mha_cache) = multi_head_attention(m, h_mod, h_mod, mha, n_heads)?;
    let resid = m.add(&att)?;
    let (out, ln_cache) = layer_norm(&resid, ln.gain, ln.bias, ln.eps)?;
    Ok((
        out,
        PropagateCache {
            mha: mha_cache,
            ln: ln_cache,
        },
    ))
}

/// Gradients of [`propagate`]: `(dM, dH_mod, MHA grads, dgain, dbias)`.
pub fn propagate_backward(
    m: &Matrix,
    h_mod: &Matrix,
    mha: MhaWeights<'_>,
    ln: LayerNormAffine<'_>,
    cache: &PropagateCache,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix, MhaGrads, Matrix, Matrix)> {
    let (d_resid, d_gain, d_bias) = layer_norm_backward(&cache.ln, ln.gain, d_out);
    let (dq, dk, dv, grads) = multi_head_attention_backward(m, h_mod, h_mod, mha, &cache.mha, &d_resid)?;
    let mut d_m = d_resid;
    d_m.add_assign(&dq)?;
    let d_hmod = dk.add(&dv)?;
    Ok((d_m, d_hmod, grads, d_gain, d_bias))
}
