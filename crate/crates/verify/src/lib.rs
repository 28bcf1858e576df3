//! Brute-force reference implementations used to check the fast paths.

use hpdp::heads::SurvivalRecord;
use hpdp::numerics::ops::cosine_sim_matrix;
use hpdp::Matrix;

/// Cox negative log partial likelihood by enumerating every risk set.
pub fn brute_cox(risks: &[f64], records: &[SurvivalRecord], eps: f64) -> f64 {
    let b = risks.len() as f64;
    let mut total = 0.0;
    for (i, ri) in records.iter().enumerate() {
        if !ri.event {
            continue;
        }
        let mut set = 0.0;
        for (j, rj) in records.iter().enumerate() {
            if rj.time >= ri.time {
                set += risks[j].exp();
            }
        }
        total -= risks[i] - (set + eps).ln();
    }
    total / b
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counted half.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

/// Harrell's C over pairs with `t_i < t_j` and an event at `i`.
pub fn brute_c_index(risks: &[f64], records: &[SurvivalRecord]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if records[i].event && records[i].time < records[j].time {
                pairs += 1.0;
                if risks[i] > risks[j] {
                    num += 1.0;
                } else if risks[i] == risks[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Per-row cosine under the assignment of rows of `a` to rows of `b` that
/// maximizes the smallest matched similarity. Exhaustive, so keep K small.
pub fn matched_cosines(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let sim = cosine_sim_matrix(a, b).unwrap();
    permutations(a.rows())
        .into_iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| sim.row(i)[j]).collect::<Vec<f64>>())
        .max_by(|x, y| {
            let mx = x.iter().copied().fold(f64::INFINITY, f64::min);
            let my = y.iter().copied().fold(f64::INFINITY, f64::min);
            mx.total_cmp(&my)
        })
        .unwrap()
}

/// Mean cosine between row `k` of `a` and row `k` of `b`.
pub fn mean_diag_cosine(a: &Matrix, b: &Matrix) -> f64 {
    let sim = cosine_sim_matrix(a, b).unwrap();
    (0..a.rows()).map(|k| sim.row(k)[k]).sum::<f64>() / a.rows() as f64
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}
