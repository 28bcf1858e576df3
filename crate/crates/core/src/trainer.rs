//! End-to-end optimization: Adam with decoupled weight decay, cosine
//! learning-rate decay, early stopping on a validation metric, and
//! evaluation into a [`MetricReport`].

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{HpdpError, Result};
use crate::hcma::{DEFAULT_N_HEADS, LAYER_NORM_EPS};
use crate::heads::{SurvivalRecord, DEFAULT_COX_EPS, DEFAULT_LAMBDA, DEFAULT_TAU_PROTO};
use crate::maps::{default_tau_dot, DEFAULT_K_FREE, DEFAULT_TAU_COS};
use crate::metrics::{auc_ovr, c_index, f1_and_acc, km_curve, logrank, median_split, MetricReport};
use crate::model::{batch_objective, forward_bag, Architecture, LossSettings, ModelParams, Task, Toggles};
use crate::numerics::{softmax_rows, Matrix};
use crate::priors::DEFAULT_K;
use crate::rng::{indexed_stream, stream};
use crate::synthdata::{split_cohort, Bag, Cohort};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub d: usize,
    pub k_sup: usize,
    pub k_free: usize,
    pub tau_cos: f64,
    /// Defaults to √D.
    pub tau_dot: Option<f64>,
    pub tau_proto: f64,
    pub n_heads: usize,
    pub ln_eps: f64,
    pub cox_eps: f64,
    pub task: Task,
    pub toggles: Toggles,
    /// Bags per optimizer step for classification.
    pub batch_size: usize,
    /// Bags per optimizer step for survival; the whole cohort when unset.
    pub cox_batch: Option<usize>,
    /// Start Prior Experts at the teachers (plus small noise) instead of at
    /// random; the supervision loss anchors them either way.
    pub warm_start_priors: bool,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 3e-4,
            lr_final: 1e-4,
            weight_decay: 1e-5,
            max_epochs: 200,
            patience: 20,
            lambda: DEFAULT_LAMBDA,
            d: 16,
            k_sup: DEFAULT_K,
            k_free: DEFAULT_K_FREE,
            tau_cos: DEFAULT_TAU_COS,
            tau_dot: None,
            tau_proto: DEFAULT_TAU_PROTO,
            n_heads: DEFAULT_N_HEADS,
            ln_eps: LAYER_NORM_EPS,
            cox_eps: DEFAULT_COX_EPS,
            task: Task::Classification,
            toggles: Toggles::all(),
            batch_size: 8,
            cox_batch: None,
            warm_start_priors: false,
            split: [0.64, 0.16, 0.2],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HpdpError::Config(m));
        for (name, v) in [
            ("lr_init", self.lr_init),
            ("lr_final", self.lr_final),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value ≥ 0, got {v}"));
            }
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be ≥ 1".into());
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return bad(format!("patience must lie in [1, max_epochs], got {}", self.patience));
        }
        if self.batch_size == 0 || self.cox_batch == Some(0) {
            return bad("batch sizes must be ≥ 1".into());
        }
        if !(self.tau_proto > 0.0) || !(self.cox_eps >= 0.0) {
            return bad("tau_proto must be positive and cox_eps ≥ 0".into());
        }
        if self.toggles.use_hcma && !self.toggles.use_text {
            return bad("use_hcma requires use_text".into());
        }
        Ok(())
    }

    pub fn architecture(&self, d_in: usize, d_text: usize, n_classes: usize) -> Architecture {
        Architecture {
            d_in,
            d: self.d,
            d_text,
            k_sup: self.k_sup,
            k_free: self.k_free,
            n_classes,
            n_heads: self.n_heads,
            tau_cos: self.tau_cos,
            tau_dot: self.tau_dot.unwrap_or_else(|| default_tau_dot(self.d)),
            ln_eps: self.ln_eps,
            task: self.task,
            toggles: self.toggles,
        }
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            lambda: self.lambda,
            tau_proto: self.tau_proto,
            cox_eps: self.cox_eps,
        }
    }
}

/// Architecture for a cohort's widths and class count.
/// `(train, validation, test)` partitions of `cohort` under `cfg.split`.
pub fn partition(cohort: &Cohort, cfg: &TrainConfig) -> Result<(Cohort, Cohort, Cohort)> {
    let [a, b, c] = cfg.split;
    split_cohort(cohort, (a, b, c), cfg.seed)
}

pub fn architecture_for(cfg: &TrainConfig, cohort: &Cohort) -> Architecture {
    let d_text = cohort.bags.first().map_or(cohort.dim(), |b| b.text.cols());
    cfg.architecture(cohort.dim(), d_text, cohort.config.n_classes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam update with decoupled weight decay applied first.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(HpdpError::NonFinite("gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (((p, g), m), v) in params
        .arrays
        .iter_mut()
        .zip(&grads.arrays)
        .zip(state.m.arrays.iter_mut())
        .zip(state.v.arrays.iter_mut())
    {
        if p.shape() != g.shape() {
            return Err(HpdpError::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        let (ps, gs, ms, vs) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
        for i in 0..ps.len() {
            ms[i] = ADAM_BETA1 * ms[i] + (1.0 - ADAM_BETA1) * gs[i];
            vs[i] = ADAM_BETA2 * vs[i] + (1.0 - ADAM_BETA2) * gs[i] * gs[i];
            let m_hat = ms[i] / c1;
            let v_hat = vs[i] / c2;
            ps[i] = ps[i] * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Cosine decay from `lr_init` at epoch 0 to `lr_final` at the last epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.max_epochs <= 1 {
        return cfg.lr_init;
    }
    let frac = (epoch.min(cfg.max_epochs - 1)) as f64 / (cfg.max_epochs - 1) as f64;
    cfg.lr_final + (cfg.lr_init - cfg.lr_final) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub task_loss: f64,
    pub proto_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,task_loss,proto_loss,val_metric,lr\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.task_loss, r.proto_loss, r.val_metric, r.lr
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation score.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Message describing a non-finite loss or gradient that ended training.
    pub diverged: Option<String>,
}

fn batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut indexed_stream(cfg.seed, "shuffle", epoch as u64));
    let size = match cfg.task {
        Task::Classification => cfg.batch_size,
        Task::Survival => cfg.cox_batch.unwrap_or(n),
    };
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Validation score used for model selection: AUC or C-index, falling back
/// to the negative validation loss when the metric is undefined.
pub fn validation_score(
    arch: &Architecture,
    params: &ModelParams,
    teachers: Option<&Matrix>,
    cohort: &Cohort,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (outputs, _) = predict(arch, params, cohort)?;
    let metric = match arch.task {
        Task::Classification => auc_ovr(&class_probs(&outputs)?, &cohort.labels())?,
        Task::Survival => c_index(&risks(&outputs), &cohort.records())?,
    };
    match metric {
        Some(m) => Ok(m),
        None => {
            let refs: Vec<&Bag> = cohort.bags.iter().collect();
            let r = batch_objective(arch, params, teachers, &refs, &cfg.loss_settings(), false)?;
            Ok(-r.loss.total)
        }
    }
}

/// Train from a fresh initialization drawn from the config seed.
pub fn train(
    train_set: &Cohort,
    val_set: &Cohort,
    teachers: Option<&Matrix>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(HpdpError::Input(
            "training and validation cohorts must be nonempty".into(),
        ));
    }
    let arch = architecture_for(cfg, train_set);
    arch.validate()?;
    let warm = if cfg.warm_start_priors { teachers } else { None };
    let params = ModelParams::init(&arch, warm, &mut stream(cfg.seed, "init"))?;
    train_from(train_set, val_set, teachers, cfg, &arch, params)
}

/// Train starting from the given parameters.
pub fn train_from(
    train_set: &Cohort,
    val_set: &Cohort,
    teachers: Option<&Matrix>,
    cfg: &TrainConfig,
    arch: &Architecture,
    mut params: ModelParams,
) -> Result<TrainOutcome> {
    params.check_shapes(arch)?;
    let settings = cfg.loss_settings();
    let mut opt = OptimizerState::new(&params);
    let mut best_params = params.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut diverged = None;

    'epochs: for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg);
        let (mut total, mut task, mut proto, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in batches(train_set.len(), cfg, epoch) {
            let bags: Vec<&Bag> = batch.iter().map(|&i| &train_set.bags[i]).collect();
            let step = batch_objective(arch, &params, teachers, &bags, &settings, true).and_then(|r| {
                let g = r.grads.as_ref().expect("gradient requested");
                adam_step(&mut params, g, &mut opt, lr, cfg.weight_decay)?;
                Ok(r)
            });
            let r = match step {
                Ok(r) => r,
                Err(HpdpError::NonFinite(msg)) => {
                    diverged = Some(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let w = bags.len() as f64;
            total += w * r.loss.total;
            task += w * r.loss.task_loss;
            proto += w * r.loss.proto_loss;
            seen += bags.len();
        }
        if !params.is_finite() {
            diverged = Some(format!("epoch {epoch}: parameters became non-finite"));
            break;
        }
        let score = match validation_score(arch, &params, teachers, val_set, cfg) {
            Ok(s) => s,
            Err(HpdpError::NonFinite(msg)) => {
                diverged = Some(format!("epoch {epoch}: validation {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let n = seen.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            train_loss: total / n,
            task_loss: task / n,
            proto_loss: proto / n,
            val_metric: score,
            lr,
        });
        if score > best_score {
            best_score = score;
            best_params = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let checkpoint = Checkpoint {
        arch: arch.clone(),
        config: cfg.clone(),
        params: best_params,
        teachers: teachers.cloned(),
        epoch: best_epoch,
        best_val: best_score.is_finite().then_some(best_score),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        best_epoch,
        diverged,
    })
}

/// Outputs (`1 × out_dim` each) and, when routing is enabled, the combined
/// attention map of every bag.
pub fn predict(
    arch: &Architecture,
    params: &ModelParams,
    cohort: &Cohort,
) -> Result<(Vec<Matrix>, Vec<Option<Matrix>>)> {
    if cohort.dim() != arch.d_in {
        return Err(HpdpError::Input(format!(
            "cohort feature width {} does not match model input width {}",
            cohort.dim(),
            arch.d_in
        )));
    }
    let fw: Vec<_> = cohort
        .bags
        .par_iter()
        .map(|b| forward_bag(arch, params, b))
        .collect::<Result<_>>()?;
    Ok(fw
        .into_iter()
        .map(|f| (f.output, f.attention.map(|a| a.a_total)))
        .unzip())
}

fn class_probs(outputs: &[Matrix]) -> Result<Vec<Vec<f64>>> {
    outputs
        .iter()
        .map(|o| Ok(softmax_rows(o, 1.0)?.row(0).to_vec()))
        .collect()
}

fn risks(outputs: &[Matrix]) -> Vec<f64> {
    outputs.iter().map(|o| o[(0, 0)]).collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Metrics of the checkpoint on `cohort`.
pub fn evaluate(ckpt: &Checkpoint, cohort: &Cohort) -> Result<MetricReport> {
    let arch = &ckpt.arch;
    if cohort.is_empty() {
        return Err(HpdpError::Input("cannot evaluate an empty cohort".into()));
    }
    let (outputs, _) = predict(arch, &ckpt.params, cohort)?;
    let mut report = MetricReport::empty(arch.task.name(), cohort.len());
    match arch.task {
        Task::Classification => {
            if cohort.config.n_classes() != arch.n_classes {
                return Err(HpdpError::Input(format!(
                    "cohort has {} classes, model predicts {}",
                    cohort.config.n_classes(),
                    arch.n_classes
                )));
            }
            let probs = class_probs(&outputs)?;
            let labels = cohort.labels();
            let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            let (acc, f1) = f1_and_acc(&pred, &labels, arch.n_classes)?;
            report.acc = Some(acc);
            report.f1_macro = Some(f1);
            report.auc = auc_ovr(&probs, &labels)?;
        }
        Task::Survival => {
            let r = risks(&outputs);
            let records = cohort.records();
            report.c_index = c_index(&r, &records)?;
            report.logrank_p = risk_groups(&r, &records)
                .map(|(hi, lo)| logrank(&hi, &lo).map(|l| l.p_value))
                .transpose()?;
        }
    }
    Ok(report)
}

/// High- and low-risk groups split at the median risk, or `None` when one
/// side would be empty.
pub fn risk_groups(risks: &[f64], records: &[SurvivalRecord]) -> Option<(Vec<SurvivalRecord>, Vec<SurvivalRecord>)> {
    let (hi, lo) = median_split(risks);
    if hi.is_empty() || lo.is_empty() {
        return None;
    }
    Some((
        hi.iter().map(|&i| records[i]).collect(),
        lo.iter().map(|&i| records[i]).collect(),
    ))
}

/// Kaplan–Meier curves of the high- and low-risk groups.
pub fn km_by_risk(ckpt: &Checkpoint, cohort: &Cohort) -> Result<Option<(Vec<(f64, f64)>, Vec<(f64, f64)>)>> {
    if ckpt.arch.task != Task::Survival {
        return Ok(None);
    }
    let (outputs, _) = predict(&ckpt.arch, &ckpt.params, cohort)?;
    Ok(risk_groups(&risks(&outputs), &cohort.records()).map(|(hi, lo)| (km_curve(&hi), km_curve(&lo))))
}

/// Routing weights as CSV: one line per instance, one column per expert.
pub fn attention_csv(ckpt: &Checkpoint, cohort: &Cohort) -> Result<Option<String>> {
    let (_, maps) = predict(&ckpt.arch, &ckpt.params, cohort)?;
    let Some(k) = maps.iter().flatten().next().map(Matrix::cols) else {
        return Ok(None);
    };
    let mut s = String::from("bag,instance,x,y");
    for j in 0..k {
        s.push_str(&format!(",a_{j}"));
    }
    s.push('\n');
    for (b, (bag, map)) in cohort.bags.iter().zip(&maps).enumerate() {
        let Some(a) = map else { continue };
        for i in 0..a.rows() {
            let c = bag.coords[i];
            s.push_str(&format!("{b},{i},{},{}", c.x, c.y));
            for v in a.row(i) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
    }
    Ok(Some(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;

    fn scalar_params(w: f64) -> ModelParams {
        ModelParams {
            arrays: vec![Matrix::row_vector(&[w])],
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = scalar_params(1.5);
        let g = scalar_params(0.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p.arrays[0][(0, 0)], 1.5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar_params(1.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &scalar_params(1.0), &mut s, 0.1, 0.0).unwrap();
        assert!((p.arrays[0][(0, 0)] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_two_steps_match_hand_recurrence() {
        // f(w) = w²/2, gradient w
        let lr = 0.05;
        let mut p = scalar_params(2.0);
        let mut s = OptimizerState::new(&p);
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
            let grad = scalar_params(p.arrays[0][(0, 0)]);
            adam_step(&mut p, &grad, &mut s, lr, 0.0).unwrap();
        }
        assert!((p.arrays[0][(0, 0)] - w).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = scalar_params(2.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &scalar_params(0.0), &mut s, 0.1, 0.5).unwrap();
        assert!((p.arrays[0][(0, 0)] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_params(1.0);
        let mut s = OptimizerState::new(&p);
        let r = adam_step(&mut p, &scalar_params(f64::NAN), &mut s, 0.1, 0.0);
        assert!(matches!(r, Err(HpdpError::NonFinite(_))));
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert!((lr_schedule(0, &cfg) - 3e-4).abs() < 1e-18);
        assert!((lr_schedule(cfg.max_epochs - 1, &cfg) - 1e-4).abs() < 1e-6);
        let odd = TrainConfig {
            max_epochs: 101,
            ..TrainConfig::default()
        };
        assert!((lr_schedule(50, &odd) - 2e-4).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            toggles: Toggles {
                use_text: false,
                ..Toggles::all()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig {
            patience: 300,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
