//! Task heads over pooled prototypes and the training objectives:
//! cross-entropy, Cox negative log partial likelihood, and the contrastive
//! prototype-anchoring loss.

use serde::{Deserialize, Serialize};

use crate::error::{HpdpError, Result};
use crate::numerics::{cosine_sim_backward, cosine_sim_matrix, linear, Matrix};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_TAU_PROTO: f64 = 0.07;
pub const DEFAULT_COX_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(HpdpError::Input(format!("survival time must be positive, got {time}")));
        }
        Ok(Self { time, event })
    }
}

/// Linear head `D → C_out` applied to the mean prototype.
#[derive(Debug, Clone, Copy)]
pub struct TaskHead<'a> {
    pub weights: &'a Matrix,
    pub bias: &'a Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub proto_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(task_loss: f64, proto_loss: f64, lambda: f64) -> Self {
        Self {
            task_loss,
            proto_loss,
            total: total_loss(task_loss, proto_loss, lambda),
            lambda,
        }
    }
}

/// Mean over prototype rows, then the linear head. Returns `1 × C_out`.
pub fn pool_and_predict(m_final: &Matrix, head: &TaskHead<'_>) -> Result<Matrix> {
    if m_final.rows() == 0 || m_final.cols() != head.weights.rows() {
        return Err(HpdpError::shape(
            "pool_and_predict",
            format!("prototypes {:?} vs head {:?}", m_final.shape(), head.weights.shape()),
        ));
    }
    linear(&m_final.mean_rows(), head.weights, head.bias)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy of `logits` (B×C) against integer labels, with the
/// gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b || b == 0 {
        return Err(HpdpError::shape(
            "cross_entropy",
            format!("{b} logit rows vs {} labels", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(HpdpError::Input(format!("label {bad} out of range for {c} classes")));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(b, c);
    for (i, &y) in labels.iter().enumerate() {
        let lp = log_softmax_row(logits.row(i));
        loss -= lp[y];
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = (lp[k].exp() - if k == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set when the batch has no observed events; value and gradient are 0.
    pub no_events: bool,
}

/// Cox negative log partial likelihood with Breslow-style ties
/// (risk set `t_j ≥ t_i`), normalized by the batch size.
pub fn cox_nll(risks: &[f64], records: &[SurvivalRecord], eps: f64) -> Result<CoxLoss> {
    let b = risks.len();
    if b == 0 || records.len() != b {
        return Err(HpdpError::shape(
            "cox_nll",
            format!("{b} risks vs {} records", records.len()),
        ));
    }
    if !(eps >= 0.0) {
        return Err(HpdpError::Config(format!("cox eps must be ≥ 0, got {eps}")));
    }
    if !records.iter().any(|r| r.event) {
        return Ok(CoxLoss {
            value: 0.0,
            grad: vec![0.0; b],
            no_events: true,
        });
    }

    // Sort by descending time so every risk set is a prefix plus its ties.
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| records[j].time.total_cmp(&records[i].time).then(i.cmp(&j)));
    let max = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled_eps = eps * (-max).exp();

    // Shifted partial sums Σ_{t_j ≥ t_i} exp(h_j − max), one per tie group.
    let mut set_sum = vec![0.0; b];
    let mut running = 0.0;
    let mut pos = 0;
    while pos < b {
        let t = records[order[pos]].time;
        let mut end = pos;
        while end < b && records[order[end]].time == t {
            running += (risks[order[end]] - max).exp();
            end += 1;
        }
        for &i in &order[pos..end] {
            set_sum[i] = running;
        }
        pos = end;
    }

    let mut value = 0.0;
    // d/dh_k of log(S_i + eps) summed over events i with t_k ≥ t_i, walked in
    // ascending time so the accumulated weight covers all earlier events.
    let mut grad = vec![0.0; b];
    let mut acc = 0.0;
    let mut pos = b;
    while pos > 0 {
        let t = records[order[pos - 1]].time;
        let mut start = pos;
        while start > 0 && records[order[start - 1]].time == t {
            start -= 1;
        }
        for &i in &order[start..pos] {
            if records[i].event {
                let denom = set_sum[i] + scaled_eps;
                value -= risks[i] - (max + denom.ln());
                acc += 1.0 / denom;
            }
        }
        for &k in &order[start..pos] {
            let own = if records[k].event { 1.0 } else { 0.0 };
            grad[k] = -(own - (risks[k] - max).exp() * acc) / b as f64;
        }
        pos = start;
    }
    Ok(CoxLoss {
        value: value / b as f64,
        grad,
        no_events: false,
    })
}

/// Contrastive anchoring of learnable experts to their index-matched
/// teachers: mean over k of `−log softmax_j(sim(p_k, t_j) / τ)[k]`.
/// Returns the loss and its gradient w.r.t. the experts.
pub fn proto_supervision(p_prior: &Matrix, p_teacher: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    if p_prior.shape() != p_teacher.shape() || p_prior.rows() == 0 {
        return Err(HpdpError::shape(
            "proto_supervision",
            format!("experts {:?} vs teachers {:?}", p_prior.shape(), p_teacher.shape()),
        ));
    }
    if !(tau > 0.0) {
        return Err(HpdpError::Config(format!(
            "prototype temperature must be positive, got {tau}"
        )));
    }
    let k = p_prior.rows();
    let sim = cosine_sim_matrix(p_prior, p_teacher)?;
    let logits = sim.scale(1.0 / tau);
    let labels: Vec<usize> = (0..k).collect();
    let (loss, d_logits) = cross_entropy(&logits, &labels)?;
    let (d_prior, _) = cosine_sim_backward(p_prior, p_teacher, &d_logits.scale(1.0 / tau))?;
    Ok((loss, d_prior))
}

pub fn total_loss(task: f64, proto: f64, lambda: f64) -> f64 {
    task + lambda * proto
}
