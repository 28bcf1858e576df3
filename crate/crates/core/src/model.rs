//! The full bag-level model: projector, positional encoding, prototype
//! routing, text-conditioned alignment and task head, with a hand-written
//! backward pass for every stage.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HpdpError, Result};
use crate::hcma::{
    generate_film_params, generate_film_params_backward, modulate, modulate_backward, propagate, propagate_backward,
    FilmCache, FilmGenerator, FilmParams, LayerNormAffine, ModulateCache, PropagateCache,
};
use crate::heads::{cox_nll, cross_entropy, proto_supervision, LossBreakdown, SurvivalRecord, TaskHead};
use crate::maps::{aggregate, maps_backward, route, AttentionMap, ExpertBank};
use crate::numerics::{gelu, gelu_backward, grad_check, linear, GradCheckReport, Matrix, MhaWeights, ParamSet};
use crate::spe::encode_coords;
use crate::synthdata::Bag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Survival,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Survival => "survival",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub use_spe: bool,
    pub use_maps: bool,
    pub use_hcma: bool,
    pub use_text: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl Toggles {
    pub fn all() -> Self {
        Self {
            use_spe: true,
            use_maps: true,
            use_hcma: true,
            use_text: true,
        }
    }

    pub fn none() -> Self {
        Self {
            use_spe: false,
            use_maps: false,
            use_hcma: false,
            use_text: false,
        }
    }
}

/// Everything that fixes the parameter shapes and the forward graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_in: usize,
    pub d: usize,
    pub d_text: usize,
    pub k_sup: usize,
    pub k_free: usize,
    pub n_classes: usize,
    pub n_heads: usize,
    pub tau_cos: f64,
    pub tau_dot: f64,
    pub ln_eps: f64,
    pub task: Task,
    pub toggles: Toggles,
}

impl Architecture {
    pub fn out_dim(&self) -> usize {
        match self.task {
            Task::Classification => self.n_classes,
            Task::Survival => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HpdpError::Config(m));
        if self.d == 0 || self.d % 4 != 0 {
            return bad(format!(
                "model width D must be a positive multiple of 4, got {}",
                self.d
            ));
        }
        if self.d_in == 0 || self.d_text == 0 {
            return bad("input and text widths must be positive".into());
        }
        if self.k_sup == 0 {
            return bad("k_sup must be ≥ 1".into());
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad(format!("D = {} is not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if self.task == Task::Classification && self.n_classes < 2 {
            return bad(format!("classification needs ≥ 2 classes, got {}", self.n_classes));
        }
        for (name, v) in [
            ("tau_cos", self.tau_cos),
            ("tau_dot", self.tau_dot),
            ("ln_eps", self.ln_eps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.toggles.use_hcma && !self.toggles.use_text {
            return bad("use_hcma requires use_text".into());
        }
        Ok(())
    }
}

/// Named parameter arrays in a fixed order.
pub const PARAM_NAMES: [&str; 28] = [
    "proj.w_in",
    "proj.b_in",
    "proj.w_hidden",
    "proj.b_hidden",
    "proj.w_out",
    "maps.p_prior",
    "maps.p_adapt",
    "film.w_hidden",
    "film.b_hidden",
    "film.w_gamma",
    "film.b_gamma",
    "film.w_beta",
    "film.b_beta",
    "ln1.gain",
    "ln1.bias",
    "mha.w_q",
    "mha.b_q",
    "mha.w_k",
    "mha.b_k",
    "mha.w_v",
    "mha.b_v",
    "mha.w_o",
    "mha.b_o",
    "ln2.gain",
    "ln2.bias",
    "text.w",
    "head.w",
    "head.b",
];

// Position of each array in `PARAM_NAMES`.
mod ix {
    pub const W_IN: usize = 0;
    pub const B_IN: usize = 1;
    pub const W_HID: usize = 2;
    pub const B_HID: usize = 3;
    pub const W_OUT: usize = 4;
    pub const P_PRIOR: usize = 5;
    pub const P_ADAPT: usize = 6;
    pub const F_WH: usize = 7;
    pub const F_BH: usize = 8;
    pub const F_WG: usize = 9;
    pub const F_BG: usize = 10;
    pub const F_WB: usize = 11;
    pub const F_BB: usize = 12;
    pub const LN1_G: usize = 13;
    pub const LN1_B: usize = 14;
    pub const MHA: usize = 15;
    pub const LN2_G: usize = 23;
    pub const LN2_B: usize = 24;
    pub const TEXT_W: usize = 25;
    pub const HEAD_W: usize = 26;
    pub const HEAD_B: usize = 27;
    pub const COUNT: usize = 28;
}

pub fn param_name(i: usize) -> &'static str {
    PARAM_NAMES[i]
}

pub fn param_shapes(arch: &Architecture) -> Vec<(usize, usize)> {
    let (di, d, dt, c) = (arch.d_in, arch.d, arch.d_text, arch.out_dim());
    let mut s = vec![
        (di, d),
        (1, d),
        (di, d),
        (1, d),
        (d, d),
        (arch.k_sup, d),
        (arch.k_free, d),
        (dt, d),
        (1, d),
        (d, d),
        (1, d),
        (d, d),
        (1, d),
        (1, d),
        (1, d),
    ];
    for _ in 0..4 {
        s.push((d, d));
        s.push((1, d));
    }
    s.extend([(1, d), (1, d), (dt, d), (d, c), (1, c)]);
    debug_assert_eq!(s.len(), ix::COUNT);
    s
}

/// Every learnable array of the model. Also used to hold gradients and
/// optimizer moments with the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arrays: Vec<Matrix>,
}

impl ParamSet for ModelParams {
    fn arrays(&self) -> Vec<(String, &Matrix)> {
        self.arrays
            .iter()
            .enumerate()
            .map(|(i, m)| (param_name(i).to_string(), m))
            .collect()
    }

    fn arrays_mut(&mut self) -> Vec<&mut Matrix> {
        self.arrays.iter_mut().collect()
    }
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            arrays: param_shapes(arch)
                .into_iter()
                .map(|(r, c)| Matrix::zeros(r, c))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self.arrays.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    /// Draw initial values. Prior experts start at their teachers plus
    /// N(0, 0.01²) noise when teachers are given.
    pub fn init<R: Rng>(arch: &Architecture, teachers: Option<&Matrix>, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut p = Self::zeros(arch);
        let (di, d, dt) = (arch.d_in as f64, arch.d as f64, arch.d_text as f64);
        p.arrays[ix::W_IN] = if arch.d_in == arch.d {
            Matrix::identity(arch.d)
        } else {
            Matrix::random_normal(arch.d_in, arch.d, 1.0 / di.sqrt(), rng)
        };
        p.arrays[ix::W_HID] = Matrix::random_normal(arch.d_in, arch.d, 1.0 / di.sqrt(), rng);
        p.arrays[ix::P_PRIOR] = match teachers {
            Some(t) => {
                if t.shape() != (arch.k_sup, arch.d) {
                    return Err(HpdpError::shape(
                        "ModelParams::init",
                        format!("teachers {:?} but experts need ({}, {})", t.shape(), arch.k_sup, arch.d),
                    ));
                }
                let noise = Normal::new(0.0, 0.01).expect("positive std");
                let mut e = t.clone();
                e.as_mut_slice().iter_mut().for_each(|v| *v += noise.sample(rng));
                e
            }
            None => Matrix::random_normal(arch.k_sup, arch.d, 1.0 / d.sqrt(), rng),
        };
        p.arrays[ix::P_ADAPT] = Matrix::random_normal(arch.k_free, arch.d, 1.0 / d.sqrt(), rng);
        p.arrays[ix::F_WH] = Matrix::random_normal(arch.d_text, arch.d, 1.0 / dt.sqrt(), rng);
        p.arrays[ix::LN1_G] = Matrix::filled(1, arch.d, 1.0);
        p.arrays[ix::LN2_G] = Matrix::filled(1, arch.d, 1.0);
        for j in 0..4 {
            p.arrays[ix::MHA + 2 * j] = Matrix::random_normal(arch.d, arch.d, 1.0 / d.sqrt(), rng);
        }
        p.arrays[ix::TEXT_W] = Matrix::random_normal(arch.d_text, arch.d, 1.0 / dt.sqrt(), rng);
        p.arrays[ix::HEAD_W] = Matrix::random_normal(arch.d, arch.out_dim(), 1.0 / d.sqrt(), rng);
        Ok(p)
    }

    /// Copy with independent N(0, std²) noise added to every entry.
    pub fn jittered<R: Rng>(&self, std: f64, rng: &mut R) -> Self {
        let noise = Normal::new(0.0, std).expect("non-negative std");
        let mut out = self.clone();
        for m in &mut out.arrays {
            m.as_mut_slice().iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        out
    }

    pub fn check_shapes(&self, arch: &Architecture) -> Result<()> {
        let want = param_shapes(arch);
        if self.arrays.len() != want.len() {
            return Err(HpdpError::shape(
                "ModelParams",
                format!("{} arrays, expected {}", self.arrays.len(), want.len()),
            ));
        }
        for (i, (m, s)) in self.arrays.iter().zip(&want).enumerate() {
            if m.shape() != *s {
                return Err(HpdpError::shape(
                    "ModelParams",
                    format!("{} is {:?}, expected {:?}", param_name(i), m.shape(), s),
                ));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            a.add_assign(b).expect("identical layouts");
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(Matrix::is_finite)
    }

    pub fn p_prior(&self) -> &Matrix {
        &self.arrays[ix::P_PRIOR]
    }

    pub fn p_adapt(&self) -> &Matrix {
        &self.arrays[ix::P_ADAPT]
    }

    fn bank(&self, arch: &Architecture) -> Result<ExpertBank<'_>> {
        ExpertBank::new(
            &self.arrays[ix::P_PRIOR],
            &self.arrays[ix::P_ADAPT],
            arch.tau_cos,
            arch.tau_dot,
        )
    }

    fn film(&self) -> FilmGenerator<'_> {
        let a = &self.arrays;
        FilmGenerator {
            w_hidden: &a[ix::F_WH],
            b_hidden: &a[ix::F_BH],
            w_gamma: &a[ix::F_WG],
            b_gamma: &a[ix::F_BG],
            w_beta: &a[ix::F_WB],
            b_beta: &a[ix::F_BB],
        }
    }

    fn mha(&self) -> MhaWeights<'_> {
        let a = &self.arrays[ix::MHA..ix::MHA + 8];
        MhaWeights {
            w_q: &a[0],
            b_q: &a[1],
            w_k: &a[2],
            b_k: &a[3],
            w_v: &a[4],
            b_v: &a[5],
            w_o: &a[6],
            b_o: &a[7],
        }
    }

    fn ln(&self, gain: usize, eps: f64) -> LayerNormAffine<'_> {
        LayerNormAffine {
            gain: &self.arrays[gain],
            bias: &self.arrays[gain + 1],
            eps,
        }
    }

    fn head(&self) -> TaskHead<'_> {
        TaskHead {
            weights: &self.arrays[ix::HEAD_W],
            bias: &self.arrays[ix::HEAD_B],
        }
    }
}

struct HcmaCache {
    film: FilmParams,
    film_cache: FilmCache,
    modulate: ModulateCache,
    h_mod: Matrix,
    propagate: PropagateCache,
}

/// Intermediate values of one bag's forward pass.
pub struct BagForward {
    pre_hidden: Matrix,
    hidden: Matrix,
    h: Matrix,
    pub attention: Option<AttentionMap>,
    m: Matrix,
    hcma: Option<HcmaCache>,
    m_final: Matrix,
    pooled: Matrix,
    /// `1 × out_dim` logits or risk.
    pub output: Matrix,
}

fn check_bag(arch: &Architecture, bag: &Bag) -> Result<()> {
    let n = bag.features.rows();
    if n == 0 {
        return Err(HpdpError::Input("bag has no instances".into()));
    }
    if bag.features.cols() != arch.d_in || bag.coords.len() != n || bag.text.shape() != (1, arch.d_text) {
        return Err(HpdpError::Input(format!(
            "bag features {:?}, {} coords, text {:?} do not match model widths (in {}, text {})",
            bag.features.shape(),
            bag.coords.len(),
            bag.text.shape(),
            arch.d_in,
            arch.d_text
        )));
    }
    Ok(())
}

pub fn forward_bag(arch: &Architecture, p: &ModelParams, bag: &Bag) -> Result<BagForward> {
    check_bag(arch, bag)?;
    let t = arch.toggles;
    let x = &bag.features;
    let a = &p.arrays;
    let pre_hidden = linear(x, &a[ix::W_HID], &a[ix::B_HID])?;
    let hidden = gelu(&pre_hidden);
    let mut h = linear(x, &a[ix::W_IN], &a[ix::B_IN])?;
    h.add_assign(&hidden.matmul(&a[ix::W_OUT])?)?;
    if t.use_spe {
        h.add_assign(&encode_coords(&bag.coords, arch.d)?)?;
    }

    let (attention, m) = if t.use_maps {
        let att = route(&h, &p.bank(arch)?)?;
        let m = aggregate(&att, &h)?;
        (Some(att), m)
    } else {
        (None, h.mean_rows())
    };

    let (hcma, m_final) = if t.use_hcma {
        let (film, film_cache) = generate_film_params(&bag.text, &p.film())?;
        let (h_mod, modulate_cache) = modulate(&m, &film, p.ln(ix::LN1_G, arch.ln_eps))?;
        let (m_final, prop) = propagate(&m, &h_mod, p.mha(), arch.n_heads, p.ln(ix::LN2_G, arch.ln_eps))?;
        let cache = HcmaCache {
            film,
            film_cache,
            modulate: modulate_cache,
            h_mod,
            propagate: prop,
        };
        (Some(cache), m_final)
    } else {
        (None, m.clone())
    };

    let mut pooled = m_final.mean_rows();
    if t.use_text && !t.use_hcma {
        pooled.add_assign(&bag.text.matmul(&a[ix::TEXT_W])?)?;
    }
    let head = p.head();
    let output = linear(&pooled, head.weights, head.bias)?;
    if !output.is_finite() {
        return Err(HpdpError::NonFinite("model output".into()));
    }
    Ok(BagForward {
        pre_hidden,
        hidden,
        h,
        attention,
        m,
        hcma,
        m_final,
        pooled,
        output,
    })
}

/// Gradients of every parameter given `d_output` (`1 × out_dim`).
pub fn backward_bag(
    arch: &Architecture,
    p: &ModelParams,
    bag: &Bag,
    fw: &BagForward,
    d_output: &Matrix,
) -> Result<ModelParams> {
    let t = arch.toggles;
    let a = &p.arrays;
    let mut g = p.zeros_like();

    g.arrays[ix::HEAD_W] = fw.pooled.matmul_tn(d_output)?;
    g.arrays[ix::HEAD_B] = d_output.clone();
    let d_pooled = d_output.matmul_nt(&a[ix::HEAD_W])?;
    if t.use_text && !t.use_hcma {
        g.arrays[ix::TEXT_W] = bag.text.matmul_tn(&d_pooled)?;
    }

    let k = fw.m_final.rows();
    let mut d_mfinal = Matrix::zeros(k, arch.d);
    for r in 0..k {
        for (c, v) in d_mfinal.row_mut(r).iter_mut().enumerate() {
            *v = d_pooled[(0, c)] / k as f64;
        }
    }

    let d_m = match &fw.hcma {
        Some(hc) => {
            let ln2 = p.ln(ix::LN2_G, arch.ln_eps);
            let (mut d_m, d_hmod, mha_g, d_g2, d_b2) =
                propagate_backward(&fw.m, &hc.h_mod, p.mha(), ln2, &hc.propagate, &d_mfinal)?;
            let ln1 = p.ln(ix::LN1_G, arch.ln_eps);
            let (d_m1, d_gamma, d_beta, d_g1, d_b1) = modulate_backward(&fw.m, &hc.film, ln1, &hc.modulate, &d_hmod)?;
            d_m.add_assign(&d_m1)?;
            let fg = generate_film_params_backward(&bag.text, &p.film(), &hc.film_cache, &d_gamma, &d_beta)?;
            g.arrays[ix::F_WH] = fg.w_hidden;
            g.arrays[ix::F_BH] = fg.b_hidden;
            g.arrays[ix::F_WG] = fg.w_gamma;
            g.arrays[ix::F_BG] = fg.b_gamma;
            g.arrays[ix::F_WB] = fg.w_beta;
            g.arrays[ix::F_BB] = fg.b_beta;
            g.arrays[ix::LN1_G] = d_g1;
            g.arrays[ix::LN1_B] = d_b1;
            let mha = [
                mha_g.w_q, mha_g.b_q, mha_g.w_k, mha_g.b_k, mha_g.w_v, mha_g.b_v, mha_g.w_o, mha_g.b_o,
            ];
            for (j, m) in mha.into_iter().enumerate() {
                g.arrays[ix::MHA + j] = m;
            }
            g.arrays[ix::LN2_G] = d_g2;
            g.arrays[ix::LN2_B] = d_b2;
            d_m
        }
        None => d_mfinal,
    };

    let d_h = match &fw.attention {
        Some(att) => {
            let mg = maps_backward(&fw.h, &p.bank(arch)?, att, &d_m)?;
            g.arrays[ix::P_PRIOR] = mg.d_prior;
            g.arrays[ix::P_ADAPT] = mg.d_adapt;
            mg.d_h
        }
        None => {
            let n = fw.h.rows();
            let mut d_h = Matrix::zeros(n, arch.d);
            for r in 0..n {
                for (c, v) in d_h.row_mut(r).iter_mut().enumerate() {
                    *v = d_m[(0, c)] / n as f64;
                }
            }
            d_h
        }
    };

    let x = &bag.features;
    g.arrays[ix::W_IN] = x.matmul_tn(&d_h)?;
    g.arrays[ix::B_IN] = d_h.col_sum();
    g.arrays[ix::W_OUT] = fw.hidden.matmul_tn(&d_h)?;
    let d_hidden = d_h.matmul_nt(&a[ix::W_OUT])?;
    let d_pre = gelu_backward(&fw.pre_hidden, &d_hidden);
    g.arrays[ix::W_HID] = x.matmul_tn(&d_pre)?;
    g.arrays[ix::B_HID] = d_pre.col_sum();
    Ok(g)
}

/// Weights and temperatures of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub lambda: f64,
    pub tau_proto: f64,
    pub cox_eps: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda: crate::heads::DEFAULT_LAMBDA,
            tau_proto: crate::heads::DEFAULT_TAU_PROTO,
            cox_eps: crate::heads::DEFAULT_COX_EPS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: Option<ModelParams>,
    pub outputs: Vec<Matrix>,
    /// Survival batch without observed events; task loss and gradient are 0.
    pub no_events: bool,
}

fn task_loss(
    arch: &Architecture,
    outputs: &[Matrix],
    bags: &[&Bag],
    settings: &LossSettings,
) -> Result<(f64, Vec<Matrix>, bool)> {
    match arch.task {
        Task::Classification => {
            let c = arch.out_dim();
            let mut logits = Matrix::zeros(outputs.len(), c);
            for (r, o) in outputs.iter().enumerate() {
                logits.row_mut(r).copy_from_slice(o.row(0));
            }
            let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
            let (loss, d) = cross_entropy(&logits, &labels)?;
            let per_bag = (0..outputs.len()).map(|r| Matrix::row_vector(d.row(r))).collect();
            Ok((loss, per_bag, false))
        }
        Task::Survival => {
            let risks: Vec<f64> = outputs.iter().map(|o| o[(0, 0)]).collect();
            let records: Vec<SurvivalRecord> = bags.iter().map(|b| b.survival).collect();
            let cox = cox_nll(&risks, &records, settings.cox_eps)?;
            let per_bag = cox.grad.iter().map(|&g| Matrix::row_vector(&[g])).collect();
            Ok((cox.value, per_bag, cox.no_events))
        }
    }
}

fn proto_active(arch: &Architecture, teachers: Option<&Matrix>) -> bool {
    arch.toggles.use_maps && teachers.is_some()
}

/// Loss over one batch and, when `with_grad`, the summed gradient.
/// Bags are processed in parallel; reductions run in bag order.
pub fn batch_objective(
    arch: &Architecture,
    p: &ModelParams,
    teachers: Option<&Matrix>,
    bags: &[&Bag],
    settings: &LossSettings,
    with_grad: bool,
) -> Result<BatchResult> {
    if bags.is_empty() {
        return Err(HpdpError::Input("empty batch".into()));
    }
    let forwards: Vec<BagForward> = bags
        .par_iter()
        .map(|b| forward_bag(arch, p, b))
        .collect::<Result<_>>()?;
    let outputs: Vec<Matrix> = forwards.iter().map(|f| f.output.clone()).collect();
    let (task, d_out, no_events) = task_loss(arch, &outputs, bags, settings)?;

    let proto = if proto_active(arch, teachers) {
        Some(proto_supervision(
            p.p_prior(),
            teachers.expect("checked"),
            settings.tau_proto,
        )?)
    } else {
        None
    };
    let proto_loss = proto.as_ref().map_or(0.0, |(l, _)| *l);
    let loss = LossBreakdown::new(task, proto_loss, settings.lambda);
    if !loss.total.is_finite() {
        return Err(HpdpError::NonFinite(format!("batch loss is {}", loss.total)));
    }

    let grads = if with_grad {
        let per_bag: Vec<ModelParams> = forwards
            .par_iter()
            .zip(bags.par_iter())
            .zip(d_out.par_iter())
            .map(|((fw, b), d)| backward_bag(arch, p, b, fw, d))
            .collect::<Result<_>>()?;
        let mut total = p.zeros_like();
        for g in &per_bag {
            total.add_assign(g);
        }
        if let Some((_, d_prior)) = &proto {
            total.arrays[ix::P_PRIOR].axpy(settings.lambda, d_prior)?;
        }
        Some(total)
    } else {
        None
    };
    Ok(BatchResult {
        loss,
        grads,
        outputs,
        no_events,
    })
}

/// Compare the analytic gradient of [`batch_objective`] at `p` against
/// central differences on `samples` coordinates spread over every array.
#[allow(clippy::too_many_arguments)]
pub fn check_model_gradient(
    arch: &Architecture,
    p: &ModelParams,
    teachers: Option<&Matrix>,
    bags: &[&Bag],
    settings: &LossSettings,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = batch_objective(arch, p, teachers, bags, settings, true)?
        .grads
        .expect("gradient requested");
    let loss = |q: &ModelParams| Ok(batch_objective(arch, q, teachers, bags, settings, false)?.loss.total);
    grad_check("model", loss, p, &analytic, step, samples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::synthdata::{generate_cohort, GeneratorConfig};

    fn arch(task: Task, toggles: Toggles) -> Architecture {
        Architecture {
            d_in: 8,
            d: 8,
            d_text: 8,
            k_sup: 3,
            k_free: 2,
            n_classes: 2,
            n_heads: 2,
            tau_cos: 0.1,
            tau_dot: 8f64.sqrt(),
            ln_eps: 1e-5,
            task,
            toggles,
        }
    }

    fn cohort() -> Vec<Bag> {
        let cfg = GeneratorConfig {
            n_bags: 4,
            instances_per_bag: [3, 6],
            dim: 8,
            ..GeneratorConfig::default()
        };
        generate_cohort(&cfg).unwrap().bags
    }

    #[test]
    fn shapes_follow_architecture() {
        let a = arch(Task::Survival, Toggles::all());
        let p = ModelParams::init(&a, None, &mut stream(1, "init")).unwrap();
        p.check_shapes(&a).unwrap();
        assert_eq!(p.arrays.len(), PARAM_NAMES.len());
        assert_eq!(p.arrays[ix::HEAD_W].shape(), (8, 1));
        assert_eq!(param_name(ix::HEAD_B), "head.b");
    }

    #[test]
    fn every_toggle_combination_runs() {
        let bags = cohort();
        let refs: Vec<&Bag> = bags.iter().collect();
        for bits in 0..16u8 {
            let t = Toggles {
                use_spe: bits & 1 != 0,
                use_maps: bits & 2 != 0,
                use_hcma: bits & 4 != 0,
                use_text: bits & 8 != 0,
            };
            let a = arch(Task::Classification, t);
            if t.use_hcma && !t.use_text {
                assert!(a.validate().is_err());
                continue;
            }
            let p = ModelParams::init(&a, None, &mut stream(2, "init")).unwrap();
            let r = batch_objective(&a, &p, None, &refs, &LossSettings::default(), true).unwrap();
            assert!(r.loss.total.is_finite());
            assert!(r.grads.unwrap().is_finite());
        }
    }

    #[test]
    fn teachers_must_match_expert_shape() {
        let a = arch(Task::Classification, Toggles::all());
        let bad = Matrix::zeros(2, 8);
        assert!(ModelParams::init(&a, Some(&bad), &mut stream(0, "init")).is_err());
    }
}
