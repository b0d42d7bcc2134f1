//! Object-wise and point-wise detection metrics.
//!
//! AUROC follows the Mann-Whitney formulation with half credit for ties;
//! AP and Max-F1 sweep thresholds over the observed score values with tied
//! scores grouped. All three admit O(n²)/full-sweep oracles used by the
//! test suite.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scoring::AnomalyResult;

fn validate_binary(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Metrics("scores and labels must be equal-length and non-empty".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metrics("scores must be finite".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Metrics("labels must be 0/1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    Ok((pos, neg))
}

/// Sorted `(score, positives, negatives)` groups, ascending by score.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in idx {
        let s = scores[i];
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if labels[i] == 1 {
                    g.1 += 1;
                } else {
                    g.2 += 1;
                }
            }
            _ => groups.push((s, (labels[i] == 1) as usize, (labels[i] == 0) as usize)),
        }
    }
    groups
}

/// Area under the ROC curve: `(correctly ordered pairs + ½·ties) / (P·N)`.
/// Errors when either class is absent.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = validate_binary(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metrics("AUROC undefined with a single class".into()));
    }
    let mut correct = 0.0f64;
    let mut cum_neg = 0.0f64;
    for (_, p, n) in tie_groups(scores, labels) {
        correct += p as f64 * cum_neg + 0.5 * p as f64 * n as f64;
        cum_neg += n as f64;
    }
    Ok(correct / (pos as f64 * neg as f64))
}

/// Average precision over descending-score thresholds with ties grouped:
/// `Σ (R_k − R_{k−1})·P_k`.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = validate_binary(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metrics("AP undefined without positives".into()));
    }
    let mut groups = tie_groups(scores, labels);
    groups.reverse(); // descending
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut last_recall = 0.0;
    let mut ap = 0.0;
    for (_, p, n) in groups {
        tp += p;
        fp += n;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - last_recall) * precision;
        last_recall = recall;
    }
    Ok(ap)
}

/// Maximum F1 over thresholds at the observed score values, predicting
/// positive at `score ≥ threshold`.
pub fn max_f1(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = validate_binary(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metrics("Max-F1 undefined without positives".into()));
    }
    let mut groups = tie_groups(scores, labels);
    groups.reverse();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best = 0.0f64;
    for (_, p, n) in groups {
        tp += p;
        fp += n;
        let fn_ = pos - tp;
        let f1 = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
        best = best.max(f1);
    }
    Ok(best)
}

/// The six benchmark metrics for one category or for a macro mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSet {
    pub o_auroc: f64,
    pub o_maxf1: f64,
    pub o_ap: f64,
    pub p_auroc: f64,
    pub p_maxf1: f64,
    pub p_ap: f64,
}

impl MetricSet {
    pub fn all_in_unit_interval(&self) -> bool {
        [
            self.o_auroc,
            self.o_maxf1,
            self.o_ap,
            self.p_auroc,
            self.p_maxf1,
            self.p_ap,
        ]
        .iter()
        .all(|v| (0.0..=1.0).contains(v))
    }
}

/// Per-category results plus the macro mean.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_category: Vec<(String, MetricSet)>,
    pub mean: MetricSet,
    pub objects_evaluated: usize,
    pub points_evaluated: usize,
}

/// One scored cloud paired with its ground truth.
#[derive(Clone, Debug)]
pub struct ScoredCloud {
    pub category: String,
    pub result: AnomalyResult,
    pub object_gt: u8,
    pub point_gt: Vec<u8>,
    /// Points included in point-wise evaluation (all true when absent).
    pub foreground: Option<Vec<bool>>,
}

/// Object metrics over per-cloud `(ξ, ξ_gt)` and point metrics over the
/// pooled foreground points of each category; dataset numbers are the
/// macro average across categories.
pub fn evaluate(scored: &[ScoredCloud]) -> Result<EvalReport> {
    if scored.is_empty() {
        return Err(Error::Metrics("nothing to evaluate".into()));
    }
    let mut by_category: BTreeMap<&str, Vec<&ScoredCloud>> = BTreeMap::new();
    for s in scored {
        by_category.entry(&s.category).or_default().push(s);
    }

    let mut per_category = Vec::new();
    let mut objects = 0usize;
    let mut points = 0usize;
    for (cat, clouds) in by_category {
        let obj_scores: Vec<f64> = clouds.iter().map(|c| c.result.score).collect();
        let obj_labels: Vec<u8> = clouds.iter().map(|c| c.object_gt).collect();
        let mut p_scores = Vec::new();
        let mut p_labels = Vec::new();
        for c in &clouds {
            if c.point_gt.len() != c.result.map.len() {
                return Err(Error::Metrics(format!(
                    "category {cat}: ground truth length {} vs map length {}",
                    c.point_gt.len(),
                    c.result.map.len()
                )));
            }
            for (i, (&s, &l)) in c.result.map.iter().zip(&c.point_gt).enumerate() {
                let keep = c.foreground.as_ref().map_or(true, |f| f[i]);
                if keep {
                    p_scores.push(s);
                    p_labels.push(l);
                }
            }
        }
        objects += obj_scores.len();
        points += p_scores.len();
        per_category.push((
            cat.to_string(),
            MetricSet {
                o_auroc: auroc(&obj_scores, &obj_labels)?,
                o_maxf1: max_f1(&obj_scores, &obj_labels)?,
                o_ap: average_precision(&obj_scores, &obj_labels)?,
                p_auroc: auroc(&p_scores, &p_labels)?,
                p_maxf1: max_f1(&p_scores, &p_labels)?,
                p_ap: average_precision(&p_scores, &p_labels)?,
            },
        ));
    }

    let n = per_category.len() as f64;
    let mean = MetricSet {
        o_auroc: per_category.iter().map(|(_, m)| m.o_auroc).sum::<f64>() / n,
        o_maxf1: per_category.iter().map(|(_, m)| m.o_maxf1).sum::<f64>() / n,
        o_ap: per_category.iter().map(|(_, m)| m.o_ap).sum::<f64>() / n,
        p_auroc: per_category.iter().map(|(_, m)| m.p_auroc).sum::<f64>() / n,
        p_maxf1: per_category.iter().map(|(_, m)| m.p_maxf1).sum::<f64>() / n,
        p_ap: per_category.iter().map(|(_, m)| m.p_ap).sum::<f64>() / n,
    };
    Ok(EvalReport {
        per_category,
        mean,
        objects_evaluated: objects,
        points_evaluated: points,
    })
}

impl EvalReport {
    /// Human-readable table, one row per category plus the mean row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "category", "O-R", "O-F", "O-P", "P-R", "P-F", "P-P"
        ));
        let row = |name: &str, m: &MetricSet| {
            format!(
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                name, m.o_auroc, m.o_maxf1, m.o_ap, m.p_auroc, m.p_maxf1, m.p_ap
            )
        };
        for (name, m) in &self.per_category {
            out.push_str(&row(name, m));
        }
        out.push_str(&row("mean", &self.mean));
        out.push_str(&format!(
            "objects = {}, points = {}\n",
            self.objects_evaluated, self.points_evaluated
        ));
        out
    }

    /// Machine-readable `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut emit = |prefix: &str, m: &MetricSet| {
            out.push_str(&format!("{prefix}.o_auroc = {}\n", m.o_auroc));
            out.push_str(&format!("{prefix}.o_maxf1 = {}\n", m.o_maxf1));
            out.push_str(&format!("{prefix}.o_ap = {}\n", m.o_ap));
            out.push_str(&format!("{prefix}.p_auroc = {}\n", m.p_auroc));
            out.push_str(&format!("{prefix}.p_maxf1 = {}\n", m.p_maxf1));
            out.push_str(&format!("{prefix}.p_ap = {}\n", m.p_ap));
        };
        for (name, m) in &self.per_category {
            emit(name, m);
        }
        emit("mean", &self.mean);
        out.push_str(&format!("objects = {}\n", self.objects_evaluated));
        out.push_str(&format!("points = {}\n", self.points_evaluated));
        out
    }
}

/// Brute-force metric oracles, exported for test targets.
pub mod oracle {
    /// O(P·N) pair counting.
    pub fn auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut correct = 0.0;
        let mut pairs = 0.0;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            if li != 1 {
                continue;
            }
            for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
                if lj != 0 || i == j {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    correct += 1.0;
                } else if si == sj {
                    correct += 0.5;
                }
            }
        }
        correct / pairs
    }

    fn confusion_at(scores: &[f64], labels: &[u8], thr: f64) -> (usize, usize, usize) {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for (&s, &l) in scores.iter().zip(labels) {
            let pred = s >= thr;
            match (pred, l) {
                (true, 1) => tp += 1,
                (true, 0) => fp += 1,
                (false, 1) => fn_ += 1,
                _ => {}
            }
        }
        (tp, fp, fn_)
    }

    /// Full threshold sweep at every distinct score, descending.
    pub fn average_precision(scores: &[f64], labels: &[u8]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut last_recall = 0.0;
        let mut ap = 0.0;
        for thr in thresholds {
            let (tp, fp, _) = confusion_at(scores, labels, thr);
            let recall = tp as f64 / pos;
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 1.0 };
            ap += (recall - last_recall) * precision;
            last_recall = recall;
        }
        ap
    }

    /// Full threshold sweep for the best F1.
    pub fn max_f1(scores: &[f64], labels: &[u8]) -> f64 {
        let mut best = 0.0f64;
        for &thr in scores {
            let (tp, fp, fn_) = confusion_at(scores, labels, thr);
            if tp > 0 {
                let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
                best = best.max(f1);
            }
        }
        best
    }
}
