//! Dual-path prototype routing and attentive aggregation.
//!
//! Prior experts route by cosine similarity (direction only), adaptive
//! experts by raw dot product (direction and magnitude). The two row-softmax
//! maps are concatenated column-wise and used directly as aggregation
//! weights, so each row of the combined map sums to 2 when both paths are
//! active.

use crate::error::{HpdpError, Result};
use crate::numerics::{cosine_sim_backward, cosine_sim_matrix, softmax_rows, softmax_rows_backward, Matrix};

pub const DEFAULT_K_FREE: usize = 4;
pub const DEFAULT_TAU_COS: f64 = 0.1;

/// Routing temperature for the dot-product path when none is configured.
pub fn default_tau_dot(d: usize) -> f64 {
    (d as f64).sqrt()
}

/// Borrowed view of the two learnable expert sets and their temperatures.
#[derive(Debug, Clone, Copy)]
pub struct ExpertBank<'a> {
    pub p_prior: &'a Matrix,
    pub p_adapt: &'a Matrix,
    pub tau_cos: f64,
    pub tau_dot: f64,
}

impl<'a> ExpertBank<'a> {
    pub fn new(p_prior: &'a Matrix, p_adapt: &'a Matrix, tau_cos: f64, tau_dot: f64) -> Result<Self> {
        if p_prior.rows() == 0 {
            return Err(HpdpError::Config("at least one prior expert is required".into()));
        }
        if p_adapt.rows() > 0 && p_adapt.cols() != p_prior.cols() {
            return Err(HpdpError::shape(
                "ExpertBank",
                format!("prior {:?} vs adaptive {:?}", p_prior.shape(), p_adapt.shape()),
            ));
        }
        for (name, t) in [("tau_cos", tau_cos), ("tau_dot", tau_dot)] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(HpdpError::Config(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(Self {
            p_prior,
            p_adapt,
            tau_cos,
            tau_dot,
        })
    }

    pub fn k_sup(&self) -> usize {
        self.p_prior.rows()
    }

    pub fn k_free(&self) -> usize {
        self.p_adapt.rows()
    }

    pub fn k_total(&self) -> usize {
        self.k_sup() + self.k_free()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub a_prior: Matrix,
    /// `N × 0` when the adaptive path is disabled.
    pub a_adapt: Matrix,
    pub a_total: Matrix,
}

fn check_width(h: &Matrix, experts: &Matrix, op: &'static str) -> Result<()> {
    if h.cols() != experts.cols() {
        return Err(HpdpError::shape(
            op,
            format!("instances {:?} vs experts {:?}", h.shape(), experts.shape()),
        ));
    }
    Ok(())
}

/// `softmax(cos(H, P_prior) / τ_cos)`, `N × K_sup`.
pub fn route_prior(h: &Matrix, bank: &ExpertBank<'_>) -> Result<Matrix> {
    check_width(h, bank.p_prior, "route_prior")?;
    softmax_rows(&cosine_sim_matrix(h, bank.p_prior)?, bank.tau_cos)
}

/// Gradients of [`route_prior`] w.r.t. `(H, P_prior)` given its output.
pub fn route_prior_backward(
    h: &Matrix,
    bank: &ExpertBank<'_>,
    a_prior: &Matrix,
    d_a: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let d_sim = softmax_rows_backward(a_prior, d_a, bank.tau_cos);
    cosine_sim_backward(h, bank.p_prior, &d_sim)
}

/// `softmax(H · P_adaptᵀ / τ_dot)`, `N × K_free`.
pub fn route_adaptive(h: &Matrix, bank: &ExpertBank<'_>) -> Result<Matrix> {
    if bank.k_free() == 0 {
        return Ok(Matrix::zeros(h.rows(), 0));
    }
    check_width(h, bank.p_adapt, "route_adaptive")?;
    softmax_rows(&h.matmul_nt(bank.p_adapt)?, bank.tau_dot)
}

/// Gradients of [`route_adaptive`] w.r.t. `(H, P_adapt)` given its output.
pub fn route_adaptive_backward(
    h: &Matrix,
    bank: &ExpertBank<'_>,
    a_adapt: &Matrix,
    d_a: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if bank.k_free() == 0 {
        return Ok((Matrix::zeros(h.rows(), h.cols()), Matrix::zeros(0, bank.p_adapt.cols())));
    }
    let d_logits = softmax_rows_backward(a_adapt, d_a, bank.tau_dot);
    Ok((d_logits.matmul(bank.p_adapt)?, d_logits.matmul_tn(h)?))
}

/// Both routing maps and their concatenation.
pub fn route(h: &Matrix, bank: &ExpertBank<'_>) -> Result<AttentionMap> {
    let a_prior = route_prior(h, bank)?;
    let a_adapt = route_adaptive(h, bank)?;
    let a_total = a_prior.concat_cols(&a_adapt)?;
    Ok(AttentionMap {
        a_prior,
        a_adapt,
        a_total,
    })
}

/// Aggregated prototypes `M = A_totalᵀ · H`, one row per expert.
pub fn aggregate(att: &AttentionMap, h: &Matrix) -> Result<Matrix> {
    if att.a_total.rows() != h.rows() {
        return Err(HpdpError::shape(
            "aggregate",
            format!("attention has {} rows, H has {}", att.a_total.rows(), h.rows()),
        ));
    }
    att.a_total.matmul_tn(h)
}

/// Gradients of [`aggregate`]: `(dA_total, dH)`.
pub fn aggregate_backward(att: &AttentionMap, h: &Matrix, dm: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((h.matmul_nt(dm)?, att.a_total.matmul(dm)?))
}

/// Gradients flowing out of the whole routing + aggregation block.
#[derive(Debug, Clone)]
pub struct MapsGrads {
    pub d_h: Matrix,
    pub d_prior: Matrix,
    pub d_adapt: Matrix,
}

/// Backward through [`route`] followed by [`aggregate`].
pub fn maps_backward(h: &Matrix, bank: &ExpertBank<'_>, att: &AttentionMap, dm: &Matrix) -> Result<MapsGrads> {
    let k_sup = bank.k_sup();
    let (d_total, mut d_h) = aggregate_backward(att, h, dm)?;
    let d_ap = d_total.cols_range(0, k_sup);
    let (dh_p, d_prior) = route_prior_backward(h, bank, &att.a_prior, &d_ap)?;
    d_h.add_assign(&dh_p)?;
    let d_aa = d_total.cols_range(k_sup, d_total.cols());
    let (dh_a, d_adapt) = route_adaptive_backward(h, bank, &att.a_adapt, &d_aa)?;
    d_h.add_assign(&dh_a)?;
    Ok(MapsGrads { d_h, d_prior, d_adapt })
}
