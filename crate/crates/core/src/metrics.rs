//! Point, calibration and OOD metrics, retained-fraction curves and
//! cross-seed rank aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{exact_sum, ExactSum};
use crate::posthoc::{Predictive, PredictiveKind};

pub const DEFAULT_ECE_LEVELS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "MAE")]
    Mae,
    #[serde(rename = "NLL")]
    Nll,
    #[serde(rename = "ECE")]
    Ece,
    #[serde(rename = "AUROC")]
    Auroc,
    #[serde(rename = "FPR95")]
    Fpr95,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Mae, Metric::Nll, Metric::Ece, Metric::Auroc, Metric::Fpr95];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Mae => "MAE",
            Metric::Nll => "NLL",
            Metric::Ece => "ECE",
            Metric::Auroc => "AUROC",
            Metric::Fpr95 => "FPR95",
        }
    }

    pub fn lower_is_better(self) -> bool {
        !matches!(self, Metric::Auroc)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub target: String,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
}

pub fn mae(mu: &[f64], y: &[f64]) -> Result<f64> {
    if mu.len() != y.len() {
        return Err(Error::shape("mae", mu.len(), y.len()));
    }
    if mu.is_empty() {
        return Err(Error::invalid("mae of zero points"));
    }
    Ok(exact_sum(mu.iter().zip(y).map(|(m, t)| (t - m).abs())) / mu.len() as f64)
}

/// Quantile `p` of point `i`'s predictive distribution: closed form for a
/// Gaussian, bisection on the mixture CDF otherwise.
pub fn predictive_quantile(pred: &Predictive, i: usize, p: f64) -> f64 {
    let vars = pred.component_variances(i);
    if pred.kind == PredictiveKind::Gaussian && vars.len() == 1 {
        return pred.mu[i] + vars[0].sqrt() * std_normal_quantile(p);
    }
    mixture_quantile(pred, i, p)
}

/// Bisection on the mixture CDF of point `i`.
pub fn mixture_quantile(pred: &Predictive, i: usize, p: f64) -> f64 {
    let sd_max = pred
        .component_variances(i)
        .iter()
        .fold(0.0f64, |a, v| a.max(v.sqrt()));
    let mut lo = pred.mu[i] - 40.0 * sd_max;
    let mut hi = pred.mu[i] + 40.0 * sd_max;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred.cdf(i, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn std_normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

/// Nominal central-interval levels `j/levels` for `j = 1..levels-1`.
pub fn ece_levels(levels: usize) -> Vec<f64> {
    (1..levels).map(|j| j as f64 / levels as f64).collect()
}

/// Mean |empirical − nominal| coverage of central predictive intervals.
pub fn ece(pred: &Predictive, y: &[f64], levels: usize) -> Result<f64> {
    if y.len() != pred.len() {
        return Err(Error::shape("ece", pred.len(), y.len()));
    }
    if y.is_empty() {
        return Err(Error::invalid("ece of zero points"));
    }
    if levels < 2 {
        return Err(Error::invalid("ece needs at least 2 levels"));
    }
    let qs = ece_levels(levels);
    let n = y.len() as f64;
    let total: f64 = qs
        .iter()
        .map(|&q| {
            let inside = (0..pred.len())
                .filter(|&i| {
                    let lo = predictive_quantile(pred, i, 0.5 - q / 2.0);
                    let hi = predictive_quantile(pred, i, 0.5 + q / 2.0);
                    lo <= y[i] && y[i] <= hi
                })
                .count();
            (inside as f64 / n - q).abs()
        })
        .sum();
    Ok(total / qs.len() as f64)
}

fn check_scores(a: &[f64], b: &[f64], op: &str) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid(format!("{op} needs nonempty ID and OOD scores")));
    }
    if a.iter().chain(b).any(|s| s.is_nan()) {
        return Err(Error::invalid(format!("{op} received NaN scores")));
    }
    Ok(())
}

/// `P(ood > id) + ½ P(ood = id)` via midranks of the pooled sample.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    check_scores(scores_id, scores_ood, "auroc")?;
    let mut pooled: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (s, false))
        .chain(scores_ood.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let midrank = (i + j + 2) as f64 / 2.0;
        let ood_in_tie = pooled[i..=j].iter().filter(|p| p.1).count();
        rank_sum_ood += midrank * ood_in_tie as f64;
        i = j + 1;
    }
    let m = scores_ood.len() as f64;
    let n = scores_id.len() as f64;
    Ok((rank_sum_ood - m * (m + 1.0) / 2.0) / (m * n))
}

/// ID false-positive rate where the ROC curve (OOD = positive, higher score
/// = more OOD) reaches 95% TPR. Tied scores form diagonal ROC segments and
/// the crossing is linearly interpolated.
pub fn fpr95(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    check_scores(scores_id, scores_ood, "fpr95")?;
    let mut id = scores_id.to_vec();
    let mut ood = scores_ood.to_vec();
    id.sort_by(|a, b| b.total_cmp(a));
    ood.sort_by(|a, b| b.total_cmp(a));
    let (n, m) = (id.len(), ood.len());
    let (mut ia, mut io) = (0usize, 0usize);
    let (mut prev_fpr, mut prev_tpr) = (0.0, 0.0);
    loop {
        let t = match (id.get(ia), ood.get(io)) {
            (Some(&a), Some(&b)) => a.max(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!("TPR reaches 1 before the scores run out"),
        };
        while ia < n && id[ia] >= t {
            ia += 1;
        }
        while io < m && ood[io] >= t {
            io += 1;
        }
        let fpr = ia as f64 / n as f64;
        let tpr = io as f64 / m as f64;
        if 20 * io >= 19 * m {
            return Ok(prev_fpr + (fpr - prev_fpr) * (0.95 - prev_tpr) / (tpr - prev_tpr));
        }
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub curve_id: String,
    /// `k/n` for `k = n..1`.
    pub retained_fraction: Vec<f64>,
    pub mae: Vec<f64>,
    pub is_oracle: bool,
}

/// MAE of the retained set as the highest-scored points are removed one by
/// one. Equal scores are removed in input order.
pub fn calibration_curve(
    curve_id: impl Into<String>,
    abs_residuals: &[f64],
    order_scores: &[f64],
    is_oracle: bool,
) -> Result<CalibrationCurve> {
    if abs_residuals.len() != order_scores.len() {
        return Err(Error::shape("calibration_curve", abs_residuals.len(), order_scores.len()));
    }
    let n = abs_residuals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| order_scores[b].total_cmp(&order_scores[a]));
    let mut acc = ExactSum::new();
    for &r in abs_residuals {
        acc.add(r);
    }
    let mut retained_fraction = Vec::with_capacity(n);
    let mut maes = Vec::with_capacity(n);
    for (removed, &idx) in order.iter().enumerate() {
        let k = n - removed;
        retained_fraction.push(k as f64 / n as f64);
        maes.push(acc.value() / k as f64);
        acc.add(-abs_residuals[idx]);
    }
    Ok(CalibrationCurve {
        curve_id: curve_id.into(),
        retained_fraction,
        mae: maes,
        is_oracle,
    })
}

/// Curve ordered by the true absolute residual.
pub fn oracle_curve(curve_id: impl Into<String>, abs_residuals: &[f64]) -> Result<CalibrationCurve> {
    calibration_curve(curve_id, abs_residuals, abs_residuals, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub metric: Metric,
    pub method: String,
    pub mean_rank: f64,
    pub sem: f64,
    pub cells: usize,
}

/// Ranks methods within every (target, seed) cell of every metric present
/// (ties share the average rank) and averages them per method.
pub fn aggregate_ranks(records: &[MetricRecord], lower_is_better: impl Fn(Metric) -> bool) -> Result<Vec<RankRow>> {
    let mut by_metric: BTreeMap<Metric, BTreeMap<(String, u64), BTreeMap<String, f64>>> = BTreeMap::new();
    for r in records {
        let cell = by_metric
            .entry(r.metric)
            .or_default()
            .entry((r.target.clone(), r.seed))
            .or_default();
        if cell.insert(r.method.clone(), r.value).is_some() {
            return Err(Error::invalid(format!(
                "duplicate record for {} / {} / {} / {}",
                r.metric, r.target, r.seed, r.method
            )));
        }
    }
    let mut out = Vec::new();
    for (metric, cells) in by_metric {
        let methods: BTreeSet<&String> = cells.values().flat_map(|c| c.keys()).collect();
        let mut ranks: BTreeMap<&String, Vec<f64>> = methods.iter().map(|m| (*m, Vec::new())).collect();
        for ((target, seed), cell) in &cells {
            for m in &methods {
                if !cell.contains_key(*m) {
                    return Err(Error::MissingCell {
                        metric: metric.to_string(),
                        target: target.clone(),
                        seed: *seed,
                        method: (*m).clone(),
                    });
                }
            }
            let lower = lower_is_better(metric);
            for (m, v) in cell {
                let better = cell
                    .values()
                    .filter(|w| if lower { **w < *v } else { **w > *v })
                    .count();
                let equal = cell.values().filter(|w| **w == *v).count();
                ranks.get_mut(m).expect("method registered").push(better as f64 + (equal as f64 + 1.0) / 2.0);
            }
        }
        for (method, rs) in ranks {
            let k = rs.len() as f64;
            let mean = rs.iter().sum::<f64>() / k;
            let sem = if rs.len() > 1 {
                (rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
            } else {
                0.0
            };
            out.push(RankRow {
                metric,
                method: method.clone(),
                mean_rank: mean,
                sem,
                cells: rs.len(),
            });
        }
    }
    Ok(out)
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("method,target,seed,metric,value\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{:?}\n", r.method, r.target, r.seed, r.metric, r.value));
    }
    out
}

pub fn curves_csv(curves: &[CalibrationCurve]) -> String {
    let mut out = String::from("curve_id,retained_fraction,mae,is_oracle\n");
    for c in curves {
        for (f, m) in c.retained_fraction.iter().zip(&c.mae) {
            out.push_str(&format!("{},{:?},{:?},{}\n", c.curve_id, f, m, c.is_oracle));
        }
    }
    out
}

pub fn ranks_csv(rows: &[RankRow]) -> String {
    let mut out = String::from("metric,method,mean_rank,sem,cells\n");
    for r in rows {
        out.push_str(&format!("{},{},{:?},{:?},{}\n", r.metric, r.method, r.mean_rank, r.sem, r.cells));
    }
    out
}
