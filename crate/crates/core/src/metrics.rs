//! Segment classification metrics and coverage-vs-k curves.

use serde::{Deserialize, Serialize};

use crate::dataio::LabeledVideo;
use crate::error::{Error, Result};
use crate::localization::{
    coverage_from_counts, coverage_hits, localize, score_video, selections, Coverage,
};
use crate::model::Checkpoint;

/// Confusion counts with abnormal as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Usage("no predictions to evaluate".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => {
                return Err(Error::Usage(format!(
                    "labels must be 0 or 1, got ({p}, {y})"
                )))
            }
        }
    }
    Ok(c)
}

/// One-vs-rest metrics of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Quantities whose denominator was zero and were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionCounts,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Support-weighted mean of the per-class F1 scores.
    pub fscore: f64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coverage_curve: Vec<(usize, Coverage)>,
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(class: u8, tp: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let mut undefined = Vec::new();
    let precision = ratio(tp, tp + fp, "precision", &mut undefined);
    let recall = ratio(tp, tp + fn_, "recall", &mut undefined);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".into());
        0.0
    };
    ClassMetrics {
        class,
        support: tp + fn_,
        precision,
        recall,
        f1,
        undefined,
    }
}

/// Accuracy, sensitivity, specificity and the support-weighted F-score.
pub fn weighted_metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Usage("no evaluated segments".into()));
    }
    let negative = class_metrics(0, c.tn, c.fn_, c.fp);
    let positive = class_metrics(1, c.tp, c.fp, c.fn_);
    let fscore = (negative.support as f64 * negative.f1 + positive.support as f64 * positive.f1)
        / total as f64;
    Ok(MetricsReport {
        confusion: *c,
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        sensitivity: positive.recall,
        specificity: negative.recall,
        fscore,
        per_class: vec![negative, positive],
        coverage_curve: Vec::new(),
    })
}

/// Coverage at each `k`, pooled over videos as `Σ hits / Σ N_ab`.
///
/// Frames are scored once; selections at larger `k` extend those at smaller
/// `k`, so the curve is non-decreasing.
pub fn coverage_curve(
    model: &Checkpoint,
    data: &[LabeledVideo],
    ks: &[usize],
    all_segments: bool,
) -> Result<Vec<(usize, Coverage)>> {
    if ks.is_empty() {
        return Err(Error::Usage("ks must be non-empty".into()));
    }
    if ks.contains(&0) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage(format!(
            "ks must be positive and ascending: {ks:?}"
        )));
    }
    let scored = data
        .iter()
        .map(|v| score_video(&v.features, &v.partition, model))
        .collect::<Result<Vec<_>>>()?;
    ks.iter()
        .map(|&k| {
            let mut hits = 0;
            let mut abnormal = 0;
            for (v, s) in data.iter().zip(&scored) {
                let sel = selections(&localize(s, k, all_segments)?);
                let h = coverage_hits(&sel, &v.annotations, &v.partition)?;
                hits += h.iter().filter(|&&x| x).count();
                abnormal += h.len();
            }
            Ok((k, coverage_from_counts(hits, abnormal)))
        })
        .collect()
}

/// `k,coverage` CSV; undefined coverage is written as `NA`.
pub fn coverage_curve_csv(curve: &[(usize, Coverage)]) -> String {
    let mut out = String::from("k,coverage\n");
    for (k, c) in curve {
        match c {
            Coverage::Value(v) => out.push_str(&format!("{k},{v}\n")),
            Coverage::NoAbnormalSegments => out.push_str(&format!("{k},NA\n")),
        }
    }
    out
}
