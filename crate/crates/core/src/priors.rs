//! Frozen teacher prototypes from K-means over the pooled instance
//! population.
//!
//! Lloyd iterations start from k-means++ seeding. Several restarts run with
//! independent streams and the lowest-inertia result is kept (ties go to the
//! lower restart index, so the outcome does not depend on scheduling).

use rand::Rng;
use rayon::prelude::*;

use crate::error::{HpdpError, Result};
use crate::numerics::Matrix;
use crate::rng;

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// Raw cluster centroids, `K × D`.
    pub centroids: Matrix,
    /// Sum of squared distances of each point to its assigned centroid.
    pub inertia: f64,
    pub assignments: Vec<usize>,
}

impl PrototypeBank {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// Centroids scaled to unit length; these anchor the prior experts.
    pub fn teachers(&self) -> Matrix {
        let mut t = self.centroids.clone();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for v in row {
                    *v /= n;
                }
            }
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

/// Result of one seeded Lloyd run, with the inertia after every assignment.
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub bank: PrototypeBank,
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid for every point; ties go to the lowest id.
pub fn assign_nearest(points: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..centroids.rows() {
                let d = sq_dist(p, centroids.row(k));
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn inertia(points: &Matrix, centroids: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &k)| sq_dist(points.row(i), centroids.row(k)))
        .sum()
}

fn kmeans_pp_init<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // Every point coincides with a chosen centroid: redraw uniformly.
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn cluster_means(points: &Matrix, labels: &[usize], k: usize) -> (Matrix, Vec<usize>) {
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            for s in sums.row_mut(c) {
                *s /= n as f64;
            }
        }
    }
    (sums, counts)
}

/// Points ordered by distance to their assigned centroid, farthest first.
fn farthest_points(points: &Matrix, centroids: &Matrix, labels: &[usize]) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = labels
        .iter()
        .enumerate()
        .map(|(i, &k)| (i, sq_dist(points.row(i), centroids.row(k))))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(i, _)| i).collect()
}

/// Move the farthest points into empty clusters, one point per empty
/// cluster, updating both centroids and labels.
fn repair_empty(points: &Matrix, centroids: &mut Matrix, labels: &mut [usize], k: usize) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    if counts.iter().all(|&c| c > 0) {
        return;
    }
    let candidates = farthest_points(points, centroids, labels);
    let mut next = candidates.into_iter();
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        // Take the farthest point whose own cluster can spare it.
        for i in next.by_ref() {
            if counts[labels[i]] > 1 {
                counts[labels[i]] -= 1;
                labels[i] = c;
                counts[c] = 1;
                centroids.row_mut(c).copy_from_slice(points.row(i));
                break;
            }
        }
    }
}

fn validate(points: &Matrix, k: usize, max_iters: usize, tol: f64) -> Result<()> {
    if k == 0 {
        return Err(HpdpError::Config("k-means needs K ≥ 1".into()));
    }
    if points.rows() < k {
        return Err(HpdpError::Input(format!(
            "k-means needs at least K = {k} points, got {}",
            points.rows()
        )));
    }
    if max_iters == 0 {
        return Err(HpdpError::Config("k-means max_iters must be ≥ 1".into()));
    }
    if !(tol >= 0.0) {
        return Err(HpdpError::Config(format!("k-means tol must be ≥ 0, got {tol}")));
    }
    if !points.is_finite() {
        return Err(HpdpError::NonFinite("k-means input contains NaN or Inf".into()));
    }
    Ok(())
}

/// One Lloyd run from a k-means++ start drawn with `rng`.
pub fn lloyd<R: Rng>(points: &Matrix, k: usize, max_iters: usize, tol: f64, rng: &mut R) -> Result<LloydRun> {
    validate(points, k, max_iters, tol)?;
    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut labels = assign_nearest(points, &centroids);
    let mut trace = vec![inertia(points, &centroids, &labels)];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let (mut next, counts) = cluster_means(points, &labels, k);
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let far = farthest_points(points, &next, &labels);
            for (c, &i) in empty.iter().zip(far.iter()) {
                next.row_mut(*c).copy_from_slice(points.row(i));
            }
        }
        let shift = next.max_abs_diff(&centroids);
        centroids = next;
        labels = assign_nearest(points, &centroids);
        trace.push(inertia(points, &centroids, &labels));
        if shift < tol {
            break;
        }
    }
    repair_empty(points, &mut centroids, &mut labels, k);
    let final_inertia = inertia(points, &centroids, &labels);
    if final_inertia != *trace.last().expect("trace is nonempty") {
        trace.push(final_inertia);
    }
    Ok(LloydRun {
        bank: PrototypeBank {
            centroids,
            inertia: final_inertia,
            assignments: labels,
        },
        inertia_trace: trace,
        iterations,
    })
}

/// Every restart of a k-means fit, in restart order.
pub fn kmeans_runs(points: &Matrix, opts: &KMeansOptions) -> Result<Vec<LloydRun>> {
    validate(points, opts.k, opts.max_iters, opts.tol)?;
    let restarts = opts.restarts.max(1);
    (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::indexed_stream(opts.seed, "kmeans", r as u64);
            lloyd(points, opts.k, opts.max_iters, opts.tol, &mut rng)
        })
        .collect()
}

/// Best-of-restarts k-means.
pub fn kmeans_with(points: &Matrix, opts: &KMeansOptions) -> Result<PrototypeBank> {
    let runs = kmeans_runs(points, opts)?;
    let mut best: Option<LloydRun> = None;
    for run in runs {
        // strict `<` keeps the lowest restart index on ties
        if best.as_ref().is_none_or(|b| run.bank.inertia < b.bank.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart").bank)
}

/// K-means with the default number of restarts.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<PrototypeBank> {
    kmeans_with(
        points,
        &KMeansOptions {
            k,
            seed,
            max_iters,
            tol,
            restarts: DEFAULT_RESTARTS,
        },
    )
}
