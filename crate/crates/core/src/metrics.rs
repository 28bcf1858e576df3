//! Evaluation metrics: accuracy, macro-F1, ROC AUC, Harrell's C-index,
//! Kaplan–Meier curves and the two-group log-rank test.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{HpdpError, Result};
use crate::heads::SurvivalRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub n: usize,
    pub acc: Option<f64>,
    pub f1_macro: Option<f64>,
    pub f1_kind: String,
    pub auc: Option<f64>,
    pub c_index: Option<f64>,
    pub logrank_p: Option<f64>,
}

impl MetricReport {
    pub fn empty(task: &str, n: usize) -> Self {
        Self {
            task: task.to_string(),
            n,
            acc: None,
            f1_macro: None,
            f1_kind: "macro".to_string(),
            auc: None,
            c_index: None,
            logrank_p: None,
        }
    }
}

/// Average 1-based ranks with ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney estimate of P(score_pos > score_neg), ties 0.5.
/// `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(HpdpError::shape(
            "auc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

/// One-vs-rest macro AUC over the columns of a `B × C` score table.
/// Classes without both positives and negatives are skipped.
pub fn auc_ovr(scores: &[Vec<f64>], labels: &[usize]) -> Result<Option<f64>> {
    let Some(c) = scores.first().map(Vec::len) else {
        return Ok(None);
    };
    if c == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let l: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return auc(&s, &l);
    }
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..c {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        if let Some(a) = auc(&s, &l)? {
            total += a;
            used += 1;
        }
    }
    Ok((used > 0).then(|| total / used as f64))
}

struct Fenwick {
    tree: Vec<f64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0.0; n + 1] }
    }

    fn add(&mut self, i: usize, v: f64) {
        let mut i = i + 1;
        while i < self.tree.len() {
            self.tree[i] += v;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum over indices `< i`.
    fn prefix(&self, i: usize) -> f64 {
        let mut i = i;
        let mut s = 0.0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's C-index over comparable pairs `t_i < t_j` with `event_i`.
/// Higher risk means shorter expected survival. `None` without comparable pairs.
pub fn c_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<Option<f64>> {
    let n = risks.len();
    if records.len() != n {
        return Err(HpdpError::shape(
            "c_index",
            format!("{n} risks vs {} records", records.len()),
        ));
    }
    let mut sorted: Vec<f64> = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.binary_search_by(|p| p.total_cmp(&r)).unwrap_or(0);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));
    let mut tree = Fenwick::new(sorted.len());
    let mut inserted = 0.0;
    let mut score = 0.0;
    let mut pairs = 0.0;
    let mut pos = 0;
    while pos < n {
        let t = records[order[pos]].time;
        let mut end = pos;
        while end < n && records[order[end]].time == t {
            end += 1;
        }
        for &i in &order[pos..end] {
            if records[i].event {
                let r = rank(risks[i]);
                let below = tree.prefix(r);
                let equal = tree.prefix(r + 1) - below;
                score += below + 0.5 * equal;
                pairs += inserted;
            }
        }
        for &i in &order[pos..end] {
            tree.add(rank(risks[i]), 1.0);
            inserted += 1.0;
        }
        pos = end;
    }
    Ok((pairs > 0.0).then(|| score / pairs))
}

/// `(accuracy, macro-F1)`. Classes with zero support and no predictions
/// still count, contributing 0.
pub fn f1_and_acc(pred: &[usize], labels: &[usize], n_classes: usize) -> Result<(f64, f64)> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(HpdpError::shape(
            "f1_and_acc",
            format!("{} predictions vs {} labels", pred.len(), labels.len()),
        ));
    }
    if let Some(bad) = pred.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(HpdpError::Input(format!(
            "class id {bad} out of range for {n_classes} classes"
        )));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let acc = tp.iter().sum::<usize>() as f64 / pred.len() as f64;
    let f1: f64 = (0..n_classes)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fneg[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .sum::<f64>()
        / n_classes as f64;
    Ok((acc, f1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRank {
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-group log-rank test, chi-square with one degree of freedom.
pub fn logrank(a: &[SurvivalRecord], b: &[SurvivalRecord]) -> Result<LogRank> {
    if a.is_empty() || b.is_empty() {
        return Err(HpdpError::Input("log-rank needs two nonempty groups".into()));
    }
    let mut all: Vec<(f64, bool, bool)> = a
        .iter()
        .map(|r| (r.time, r.event, true))
        .chain(b.iter().map(|r| (r.time, r.event, false)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut at_risk = all.len() as f64;
    let mut at_risk_a = a.len() as f64;
    let (mut obs, mut exp, mut var) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let mut j = i;
        let (mut d, mut d_a, mut leave, mut leave_a) = (0.0, 0.0, 0.0, 0.0);
        while j < all.len() && all[j].0 == t {
            let (_, event, in_a) = all[j];
            if event {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            leave += 1.0;
            if in_a {
                leave_a += 1.0;
            }
            j += 1;
        }
        if d > 0.0 {
            obs += d_a;
            exp += d * at_risk_a / at_risk;
            if at_risk > 1.0 {
                let frac = at_risk_a / at_risk;
                var += d * frac * (1.0 - frac) * (at_risk - d) / (at_risk - 1.0);
            }
        }
        at_risk -= leave;
        at_risk_a -= leave_a;
        i = j;
    }
    let diff = obs - exp;
    let statistic = if var > 0.0 { diff * diff / var } else { 0.0 };
    Ok(LogRank {
        observed_a: obs,
        expected_a: exp,
        variance: var,
        statistic,
        p_value: chi2_sf_1df(statistic),
    })
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1df(x: f64) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    ChiSquared::new(1.0).map(|d| d.sf(x)).unwrap_or(1.0)
}

/// Product-limit survival estimate as `(time, S(time))` steps, starting at
/// `(0, 1)` and dropping at each distinct event time.
pub fn km_curve(records: &[SurvivalRecord]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<&SurvivalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut curve = vec![(0.0, 1.0)];
    let mut surv = 1.0;
    let mut at_risk = sorted.len() as f64;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let mut j = i;
        let mut d = 0.0;
        while j < sorted.len() && sorted[j].time == t {
            if sorted[j].event {
                d += 1.0;
            }
            j += 1;
        }
        if d > 0.0 {
            surv *= 1.0 - d / at_risk;
            curve.push((t, surv));
        }
        at_risk -= (j - i) as f64;
        i = j;
    }
    curve
}

/// Two-column CSV of a KM step function.
pub fn km_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("time,survival\n");
    for (t, v) in curve {
        s.push_str(&format!("{t},{v}\n"));
    }
    s
}

/// Indices above the median risk (high-risk group) and the rest.
pub fn median_split(risks: &[f64]) -> (Vec<usize>, Vec<usize>) {
    if risks.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let mut sorted = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (0..n).partition(|&i| risks[i].partial_cmp(&median) == Some(Ordering::Greater))
}
