//! Temporal pooling at inference time: per-frame scores, top-k frame
//! selection per segment and the coverage metric.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{derive_segment_labels, Annotations, FeatureMatrix};
use crate::error::{Error, Result};
use crate::graph::{build_graph, SegmentGraph};
use crate::model::{forward, Checkpoint, ModelParams};
use crate::numerics::{dot, sigmoid};
use crate::segmentation::{split_video, Partition};

/// Decision threshold on `ŷ` for calling a segment abnormal.
pub const ABNORMAL_THRESHOLD: f64 = 0.5;

/// `score_i = α_i · sigmoid(w_cᵀ h_i + b_c)`: each node's attention-weighted
/// share of the abnormal prediction. Readouts without attention use `α = 1/n`.
pub fn node_scores(g: &SegmentGraph, params: &ModelParams) -> Result<Vec<f64>> {
    let cache = forward(g, params)?;
    Ok(scores_from_cache(&cache, params))
}

fn scores_from_cache(cache: &crate::model::ForwardCache, params: &ModelParams) -> Vec<f64> {
    let w = &params.weights;
    cache
        .node_embeddings()
        .row_iter()
        .zip(&cache.readout.alpha)
        .map(|(h, a)| a * sigmoid(dot(&w.classifier, h) + w.classifier_bias))
        .collect()
}

/// Indices of the `k` largest scores in rank order; ties go to the earlier
/// index. Selections for growing `k` are prefixes of one another.
pub fn topk_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Usage(
            "cannot select frames from an empty score list".into(),
        ));
    }
    if k == 0 {
        return Err(Error::Usage("k must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Coverage, or the explicit absence of abnormal segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Value(f64),
    NoAbnormalSegments,
}

impl Coverage {
    pub fn value(self) -> Option<f64> {
        match self {
            Coverage::Value(v) => Some(v),
            Coverage::NoAbnormalSegments => None,
        }
    }
}

/// `C = hits / N_ab` from integer counts.
pub fn coverage_from_counts(hits: usize, abnormal_segments: usize) -> Coverage {
    if abnormal_segments == 0 {
        Coverage::NoAbnormalSegments
    } else {
        Coverage::Value(hits as f64 / abnormal_segments as f64)
    }
}

/// Mean of per-segment hit indicators.
pub fn coverage_from_hits(hits: &[bool]) -> Coverage {
    coverage_from_counts(hits.iter().filter(|&&h| h).count(), hits.len())
}

/// Per-abnormal-segment hit indicators, in segment order. Selections are
/// keyed by segment index and hold global frame indices; an abnormal segment
/// without a selection counts as a miss.
pub fn coverage_hits(
    selections: &BTreeMap<usize, Vec<usize>>,
    ann: &Annotations,
    partition: &Partition,
) -> Result<Vec<bool>> {
    let labels = ann.labels()?;
    let segment_labels = derive_segment_labels(ann, partition)?;
    let spans: Vec<(usize, usize)> = partition.spans().collect();
    for (&seg, frames) in selections {
        let Some(&(s, e)) = spans.get(seg) else {
            return Err(Error::Usage(format!("selection for unknown segment {seg}")));
        };
        if let Some(f) = frames.iter().find(|&&f| f < s || f >= e) {
            return Err(Error::Usage(format!(
                "frame {f} lies outside segment {seg} [{s}, {e})"
            )));
        }
    }
    Ok(segment_labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == 1)
        .map(|(seg, _)| {
            selections
                .get(&seg)
                .is_some_and(|frames| frames.iter().any(|&f| labels[f] == 1))
        })
        .collect())
}

/// Fraction of abnormal segments whose selection contains at least one
/// abnormal frame.
pub fn coverage(
    selections: &BTreeMap<usize, Vec<usize>>,
    ann: &Annotations,
    partition: &Partition,
) -> Result<Coverage> {
    Ok(coverage_from_hits(&coverage_hits(
        selections, ann, partition,
    )?))
}

/// Classifier output and frame scores of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentScores {
    pub segment_id: usize,
    pub start: usize,
    pub end: usize,
    pub probability: f64,
    pub scores: Vec<f64>,
}

impl SegmentScores {
    pub fn predicted(&self) -> u8 {
        u8::from(self.probability >= ABNORMAL_THRESHOLD)
    }
}

/// Builds every segment graph and scores it. Segments are processed in
/// parallel; results come back in segment order.
pub fn score_video(
    features: &FeatureMatrix,
    partition: &Partition,
    model: &Checkpoint,
) -> Result<Vec<SegmentScores>> {
    let segments = split_video(features, partition)?;
    let spans: Vec<(usize, usize)> = partition.spans().collect();
    segments
        .par_iter()
        .zip(spans.par_iter())
        .enumerate()
        .map(|(id, (seg, &(start, end)))| {
            let g = build_graph(seg, &model.similarity, start, None)?;
            let cache = forward(&g, &model.params)?;
            Ok(SegmentScores {
                segment_id: id,
                start,
                end,
                probability: cache.prediction,
                scores: scores_from_cache(&cache, &model.params),
            })
        })
        .collect()
}

/// One segment's localization output, as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub segment_id: usize,
    pub start: usize,
    pub end: usize,
    pub predicted: u8,
    pub k: usize,
    /// Global frame indices in rank order; empty when the segment was not
    /// localized.
    pub selected_frames: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Selects top-k frames in segments predicted abnormal, or in every segment
/// when `all_segments` is set.
pub fn localize(
    scored: &[SegmentScores],
    k: usize,
    all_segments: bool,
) -> Result<Vec<LocalizationResult>> {
    scored
        .iter()
        .map(|s| {
            let predicted = s.predicted();
            let active = all_segments || predicted == 1;
            let selected_frames = if active {
                topk_select(&s.scores, k)?
                    .into_iter()
                    .map(|i| s.start + i)
                    .collect()
            } else {
                Vec::new()
            };
            Ok(LocalizationResult {
                segment_id: s.segment_id,
                start: s.start,
                end: s.end,
                predicted,
                k,
                selected_frames,
                scores: if active { s.scores.clone() } else { Vec::new() },
            })
        })
        .collect()
}

/// Selections of localized segments, keyed by segment index.
pub fn selections(results: &[LocalizationResult]) -> BTreeMap<usize, Vec<usize>> {
    results
        .iter()
        .filter(|r| !r.selected_frames.is_empty())
        .map(|r| (r.segment_id, r.selected_frames.clone()))
        .collect()
}
