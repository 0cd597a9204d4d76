//! Point-level anomaly detection metrics.
//!
//! Higher scores mean "more anomalous"; `truth[i]` is true for anomaly
//! points. Tied scores are always treated as a single threshold.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const RANGE_BIN_EDGES: [f64; 6] = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0];
pub const TARGET_TPR: f64 = 0.95;

/// Scores and ground truth for one evaluation unit, with optional ranges.
#[derive(Clone, Debug, Default)]
pub struct EvalPair {
    scores: Vec<f64>,
    truth: Vec<bool>,
    ranges: Option<Vec<f64>>,
}

impl EvalPair {
    pub fn new(scores: Vec<f64>, truth: Vec<bool>, ranges: Option<Vec<f64>>) -> Result<Self> {
        if scores.len() != truth.len() {
            return Err(Error::validation(format!(
                "{} scores for {} labels",
                scores.len(),
                truth.len()
            )));
        }
        if let Some(r) = &ranges {
            if r.len() != scores.len() {
                return Err(Error::validation(format!("{} ranges for {} scores", r.len(), scores.len())));
            }
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::validation(format!("score {i} is not finite")));
        }
        Ok(Self { scores, truth, ranges })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truth(&self) -> &[bool] {
        &self.truth
    }

    pub fn ranges(&self) -> Option<&[f64]> {
        self.ranges.as_deref()
    }

    pub fn positives(&self) -> usize {
        self.truth.iter().filter(|&&t| t).count()
    }

    /// Appends another unit; ranges are kept only if both sides have them.
    pub fn extend(&mut self, other: &EvalPair) {
        let had_points = !self.scores.is_empty();
        self.scores.extend_from_slice(&other.scores);
        self.truth.extend_from_slice(&other.truth);
        self.ranges = match (self.ranges.take(), &other.ranges) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if !had_points => Some(b.clone()),
            _ => None,
        };
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> EvalPair {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        EvalPair {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            truth: idx.iter().map(|&i| self.truth[i]).collect(),
            ranges: self.ranges.as_ref().map(|r| idx.iter().map(|&i| r[i]).collect()),
        }
    }
}

fn class_counts(truth: &[bool]) -> Result<(usize, usize)> {
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 {
        return Err(Error::UndefinedMetric("no anomaly points"));
    }
    if neg == 0 {
        return Err(Error::UndefinedMetric("no inlier points"));
    }
    Ok((pos, neg))
}

/// Cumulative (true positives, false positives) at every distinct
/// threshold, from the highest score down.
fn roc_steps(scores: &[f64], truth: &[bool]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if truth[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            steps.push((tp, fp));
        }
    }
    steps
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks.
pub fn auroc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(truth)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end are 1-based start+1..=end
        let mid = (start + 1 + end) as f64 / 2.0;
        rank_sum += mid * order[start..end].iter().filter(|&&i| truth[i]).count() as f64;
        start = end;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Trapezoidal area under the ROC curve; agrees with [`auroc`] up to rounding.
pub fn auroc_trapezoid(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(truth)?;
    let mut area = 0.0;
    let (mut tp0, mut fp0) = (0usize, 0usize);
    for (tp, fp) in roc_steps(scores, truth) {
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        tp0 = tp;
        fp0 = fp;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// False-positive rate at the highest threshold whose TPR reaches `target`.
pub fn fpr_at_tpr(scores: &[f64], truth: &[bool], target: f64) -> Result<f64> {
    let (pos, neg) = class_counts(truth)?;
    roc_steps(scores, truth)
        .into_iter()
        .find(|&(tp, _)| tp as f64 / pos as f64 >= target)
        .map(|(_, fp)| fp as f64 / neg as f64)
        .ok_or(Error::UndefinedMetric("target TPR is not reachable"))
}

/// Step-wise average precision: `Σ (R_k − R_{k−1}) P_k` over distinct
/// thresholds.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let pos = truth.iter().filter(|&&t| t).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("no anomaly points"));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in roc_steps(scores, truth) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// AP per range bin `[edges[k], edges[k+1])`. A bin with no anomaly point
/// is `None`; points outside every bin are ignored.
pub fn range_binned_ap(pair: &EvalPair, edges: &[f64]) -> Result<Vec<Option<f64>>> {
    let ranges = pair
        .ranges()
        .ok_or_else(|| Error::validation("range-binned AP needs point ranges"))?;
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::validation("bin edges must be strictly increasing"));
    }
    Ok(edges
        .windows(2)
        .map(|w| {
            let bin = pair.subset(|i| ranges[i] >= w[0] && ranges[i] < w[1]);
            average_precision(&bin.scores, &bin.truth).ok()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub points: usize,
    pub anomalies: usize,
    pub auroc: f64,
    pub fpr_at_95tpr: f64,
    pub ap: f64,
    /// `(lo, hi, ap)` per bin, present when ranges were supplied.
    pub range_bins: Vec<(f64, f64, Option<f64>)>,
}

impl MetricReport {
    pub fn compute(pair: &EvalPair) -> Result<Self> {
        let range_bins = match pair.ranges() {
            Some(_) => RANGE_BIN_EDGES
                .windows(2)
                .zip(range_binned_ap(pair, &RANGE_BIN_EDGES)?)
                .map(|(w, ap)| (w[0], w[1], ap))
                .collect(),
            None => Vec::new(),
        };
        Ok(Self {
            points: pair.len(),
            anomalies: pair.positives(),
            auroc: auroc(pair.scores(), pair.truth())?,
            fpr_at_95tpr: fpr_at_tpr(pair.scores(), pair.truth(), TARGET_TPR)?,
            ap: average_precision(pair.scores(), pair.truth())?,
            range_bins,
        })
    }

    /// `key=value` lines; undefined bins are written as `nan`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "points={}", self.points);
        let _ = writeln!(s, "anomalies={}", self.anomalies);
        let _ = writeln!(s, "auroc={:.6}", self.auroc);
        let _ = writeln!(s, "fpr_at_95tpr={:.6}", self.fpr_at_95tpr);
        let _ = writeln!(s, "ap={:.6}", self.ap);
        for (lo, hi, ap) in &self.range_bins {
            let v = ap.map_or("nan".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "ap_bin_{lo:.0}_{hi:.0}={v}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16}{:>12}", "metric", "value");
        let _ = writeln!(s, "{:<16}{:>12.2}", "AUROC (%)", 100.0 * self.auroc);
        let _ = writeln!(s, "{:<16}{:>12.2}", "FPR@95 (%)", 100.0 * self.fpr_at_95tpr);
        let _ = writeln!(s, "{:<16}{:>12.2}", "AP (%)", 100.0 * self.ap);
        for (lo, hi, ap) in &self.range_bins {
            let label = format!("AP {lo:.0}-{hi:.0}m");
            match ap {
                Some(v) => {
                    let _ = writeln!(s, "{label:<16}{:>12.2}", 100.0 * v);
                }
                None => {
                    let _ = writeln!(s, "{label:<16}{:>12}", "n/a");
                }
            }
        }
        s
    }
}

/// Per-scan metrics, keeping scans whose metrics are undefined as `None`.
pub fn per_scan_reports(pairs: &[(String, EvalPair)]) -> Vec<(String, Option<MetricReport>)> {
    pairs
        .iter()
        .map(|(id, p)| (id.clone(), MetricReport::compute(p).ok()))
        .collect()
}
