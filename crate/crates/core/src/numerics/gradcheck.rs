//! Central-difference verification of analytic gradients.

use rand::Rng;
use serde::Serialize;

use crate::error::{HpdpError, Result};
use crate::rng;

use super::matrix::Matrix;

/// A collection of named arrays that can be perturbed coordinate-wise.
pub trait ParamSet: Clone {
    fn arrays(&self) -> Vec<(String, &Matrix)>;
    fn arrays_mut(&mut self) -> Vec<&mut Matrix>;

    fn n_coords(&self) -> usize {
        self.arrays().iter().map(|(_, m)| m.len()).sum()
    }
}

impl ParamSet for Vec<Matrix> {
    fn arrays(&self) -> Vec<(String, &Matrix)> {
        self.iter().enumerate().map(|(i, m)| (format!("arg{i}"), m)).collect()
    }

    fn arrays_mut(&mut self) -> Vec<&mut Matrix> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    /// Name of the array holding the worst coordinate.
    pub worst_array: String,
    /// (array position, flat element index) of the worst coordinate.
    pub worst_index: (usize, usize),
    pub samples: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

fn coordinates<P: ParamSet>(params: &P, samples: usize, seed: u64) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params.arrays().iter().map(|(_, m)| m.len()).collect();
    let total: usize = sizes.iter().sum();
    if total <= samples {
        return sizes
            .iter()
            .enumerate()
            .flat_map(|(a, &n)| (0..n).map(move |i| (a, i)))
            .collect();
    }
    // Round-robin over the non-empty arrays so every group is covered.
    let live: Vec<usize> = (0..sizes.len()).filter(|&a| sizes[a] > 0).collect();
    let mut rng = rng::stream(seed, "gradcheck");
    (0..samples)
        .map(|s| {
            let a = live[s % live.len()];
            (a, rng.random_range(0..sizes[a]))
        })
        .collect()
}

/// Compare `analytic` against central differences of `loss` at `params`.
///
/// The error at each sampled coordinate is
/// `|analytic − fd| / max(1, |fd|)`; the report carries the maximum.
pub fn grad_check<P, F>(
    op_name: &str,
    loss: F,
    params: &P,
    analytic: &P,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    P: ParamSet,
    F: Fn(&P) -> Result<f64>,
{
    if !(1e-7..=1e-4).contains(&step) {
        return Err(HpdpError::Config(format!(
            "finite-difference step {step} outside [1e-7, 1e-4]"
        )));
    }
    let shapes_match = params
        .arrays()
        .iter()
        .zip(analytic.arrays())
        .all(|((_, p), (_, g))| p.shape() == g.shape());
    if !shapes_match || params.arrays().len() != analytic.arrays().len() {
        return Err(HpdpError::shape(
            "grad_check",
            "analytic gradient layout differs from parameters",
        ));
    }

    let base = loss(params)?;
    if !base.is_finite() {
        return Err(HpdpError::NonFinite(format!("{op_name}: loss at base point is {base}")));
    }

    let names: Vec<String> = params.arrays().into_iter().map(|(n, _)| n).collect();
    let coords = coordinates(params, samples, seed);
    let mut report = GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_err: 0.0,
        worst_array: names.first().cloned().unwrap_or_default(),
        worst_index: (0, 0),
        samples: coords.len(),
    };
    let mut probe = params.clone();
    for (a, i) in coords {
        let orig = params.arrays()[a].1.as_slice()[i];
        probe.arrays_mut()[a].as_mut_slice()[i] = orig + step;
        let plus = loss(&probe)?;
        probe.arrays_mut()[a].as_mut_slice()[i] = orig - step;
        let minus = loss(&probe)?;
        probe.arrays_mut()[a].as_mut_slice()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(HpdpError::NonFinite(format!(
                "{op_name}: loss non-finite when perturbing {}[{i}]",
                names[a]
            )));
        }
        let fd = (plus - minus) / (2.0 * step);
        let an = analytic.arrays()[a].1.as_slice()[i];
        let err = (an - fd).abs() / fd.abs().max(1.0);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_array = names[a].clone();
            report.worst_index = (a, i);
        }
    }
    Ok(report)
}
