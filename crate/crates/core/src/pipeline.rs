//! End-to-end wiring: run configuration, data directories and the
//! segment → graph → train → classify → localize stages.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    derive_segment_labels, read_annotations, read_feature_matrix, synth_video, write_annotations,
    write_feature_matrix, Annotations, FeatureFormat, FeatureMatrix, LabeledVideo, SynthConfig,
    SynthVideo,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, SegmentGraph, SimilarityConfig};
use crate::localization::{localize, score_video, LocalizationResult, SegmentScores};
use crate::metrics::{confusion, weighted_metrics, MetricsReport};
use crate::model::{
    train, AggregatorKind, Checkpoint, ModelConfig, ReadoutKind, TrainConfig, TrainOutcome,
};
use crate::segmentation::{
    pelt, read_partition, split_video, write_partition, Partition, SegmentationConfig,
};

pub const ANNOTATIONS_SUFFIX: &str = ".annotations.json";
pub const PARTITION_SUFFIX: &str = ".partition.json";
pub const TRUE_PARTITION_SUFFIX: &str = ".true_partition.json";

/// Architecture knobs; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub aggregator_kind: AggregatorKind,
    pub readout_kind: ReadoutKind,
    /// Attention width; defaults to the last hidden width.
    pub a_dim: Option<usize>,
    pub attention_divide_by_n: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32, 32],
            aggregator_kind: AggregatorKind::Gated,
            readout_kind: ReadoutKind::Attention,
            a_dim: None,
            attention_divide_by_n: true,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        let mut cfg = ModelConfig::new(dims, self.aggregator_kind, self.readout_kind);
        if let Some(a) = self.a_dim {
            cfg.a_dim = a;
        }
        cfg.attention_divide_by_n = self.attention_divide_by_n;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Run configuration shared by every CLI command. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Number of synthetic videos written by `synth`.
    pub videos: usize,
    /// Optional explicit feature files.
    pub features: Vec<PathBuf>,
    pub segmentation: SegmentationConfig,
    pub similarity: SimilarityConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    /// Localize every segment, not only those predicted abnormal.
    pub localize_all_segments: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            videos: 1,
            features: Vec::new(),
            segmentation: SegmentationConfig::default(),
            similarity: SimilarityConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            ks: vec![1, 2, 3, 5, 7, 9],
            localize_all_segments: false,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.segmentation.validate()?;
        self.similarity.validate()?;
        self.train.validate()?;
        if self.videos == 0 {
            return Err(Error::Config("videos must be >= 1".into()));
        }
        if self.model.hidden_dims.is_empty() || self.model.hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "hidden_dims must be non-empty and positive: {:?}",
                self.model.hidden_dims
            )));
        }
        if self.model.a_dim == Some(0) {
            return Err(Error::Config("a_dim must be positive".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "ks must be positive and ascending: {:?}",
                self.ks
            )));
        }
        if let Some(p) = self.features.iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!(
                "feature file {} does not exist",
                p.display()
            )));
        }
        Ok(())
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
    }
}

/// Videos `seed, seed+1, …` sharing one abnormality pattern.
pub fn synth_batch(cfg: &SynthConfig, count: usize) -> Result<Vec<SynthVideo>> {
    (0..count as u64)
        .map(|i| {
            synth_video(&SynthConfig {
                seed: cfg.seed.wrapping_add(i),
                offset_seed: Some(cfg.offset_seed.unwrap_or(cfg.seed)),
                ..cfg.clone()
            })
        })
        .collect()
}

/// Writes `<id>.cegf`, `<id>.annotations.json` and `<id>.true_partition.json`
/// and returns their paths. Files already written are removed if a later one
/// fails.
pub fn write_synth_video(video: &SynthVideo, dir: &Path) -> Result<Vec<PathBuf>> {
    let id = &video.features.video_id;
    let paths = vec![
        dir.join(format!("{id}.cegf")),
        dir.join(format!("{id}{ANNOTATIONS_SUFFIX}")),
        dir.join(format!("{id}{TRUE_PARTITION_SUFFIX}")),
    ];
    let result = write_feature_matrix(&video.features, &paths[0], FeatureFormat::Cegf)
        .and_then(|()| write_annotations(&video.annotations, &paths[1]))
        .and_then(|()| write_partition(id, &video.partition, &paths[2]));
    if let Err(e) = result {
        for p in &paths {
            let _ = std::fs::remove_file(p);
        }
        return Err(e);
    }
    Ok(paths)
}

/// Feature files in `dir` (`.cegf` or `.csv`), sorted by name.
pub fn feature_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && (ext.eq_ignore_ascii_case("cegf") || ext.eq_ignore_ascii_case("csv")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Usage(format!(
            "no feature files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn sibling(features: &Path, suffix: &str) -> PathBuf {
    let stem = features
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    features.with_file_name(format!("{stem}{suffix}"))
}

/// Loads a feature file with its annotations. The partition comes from
/// `<stem>.partition.json` when present, otherwise from PELT.
pub fn load_labeled_video(features: &Path, seg: &SegmentationConfig) -> Result<LabeledVideo> {
    let f = read_feature_matrix(features)?;
    let ann_path = sibling(features, ANNOTATIONS_SUFFIX);
    let annotations = read_annotations(&ann_path)?;
    annotations.validate(Some(f.frame_count()))?;
    let part_path = sibling(features, PARTITION_SUFFIX);
    let partition = if part_path.exists() {
        read_partition(&part_path)?.1
    } else {
        pelt(&f, seg)?
    };
    if partition.frame_count() != f.frame_count() {
        return Err(Error::Usage(format!(
            "partition of {} covers {} frames, video has {}",
            features.display(),
            partition.frame_count(),
            f.frame_count()
        )));
    }
    Ok(LabeledVideo {
        features: f,
        annotations,
        partition,
    })
}

pub fn load_data_dir(dir: &Path, seg: &SegmentationConfig) -> Result<Vec<LabeledVideo>> {
    feature_files(dir)?
        .iter()
        .map(|p| load_labeled_video(p, seg))
        .collect()
}

/// One graph per segment, labelled by the multiple-instance rule.
pub fn labeled_graphs(
    video: &LabeledVideo,
    sim: &SimilarityConfig,
) -> Result<Vec<(SegmentGraph, u8)>> {
    let labels = derive_segment_labels(&video.annotations, &video.partition)?;
    let segments = split_video(&video.features, &video.partition)?;
    let starts: Vec<usize> = video.partition.spans().map(|(s, _)| s).collect();
    segments
        .par_iter()
        .zip(starts.par_iter())
        .zip(labels.par_iter())
        .map(|((seg, &start), &y)| Ok((build_graph(seg, sim, start, Some(y))?, y)))
        .collect()
}

/// Trains a model on every segment of every video.
pub fn train_on_videos(
    videos: &[LabeledVideo],
    cfg: &RunConfig,
) -> Result<(Checkpoint, TrainOutcome)> {
    let first = videos
        .first()
        .ok_or_else(|| Error::Usage("no training videos".into()))?;
    let input_dim = first.features.feature_dim();
    let mut graphs = Vec::new();
    for v in videos {
        graphs.extend(labeled_graphs(v, &cfg.similarity)?);
    }
    let model = cfg.model.model_config(input_dim)?;
    let outcome = train(&graphs, model, &cfg.train)?;
    let ckpt = Checkpoint {
        params: outcome.params.clone(),
        similarity: cfg.similarity.clone(),
        segmentation: cfg.segmentation.clone(),
    };
    Ok((ckpt, outcome))
}

/// Segment-level prediction, as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentPrediction {
    pub segment_id: usize,
    pub start: usize,
    pub end: usize,
    pub probability: f64,
    pub predicted: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predictions {
    pub video_id: String,
    pub segments: Vec<SegmentPrediction>,
}

impl Predictions {
    pub fn from_scores(video_id: &str, scored: &[SegmentScores]) -> Self {
        Self {
            video_id: video_id.to_string(),
            segments: scored
                .iter()
                .map(|s| SegmentPrediction {
                    segment_id: s.segment_id,
                    start: s.start,
                    end: s.end,
                    probability: s.probability,
                    predicted: s.predicted(),
                })
                .collect(),
        }
    }

    pub fn labels(&self) -> Vec<u8> {
        self.segments.iter().map(|s| s.predicted).collect()
    }
}

pub fn classify_video(
    model: &Checkpoint,
    features: &FeatureMatrix,
    partition: &Partition,
) -> Result<Predictions> {
    let scored = score_video(features, partition, model)?;
    Ok(Predictions::from_scores(&features.video_id, &scored))
}

/// Top-k localization of one video, as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Localizations {
    pub video_id: String,
    pub k: usize,
    pub segments: Vec<LocalizationResult>,
}

pub fn localize_video(
    model: &Checkpoint,
    features: &FeatureMatrix,
    partition: &Partition,
    k: usize,
    all_segments: bool,
) -> Result<Localizations> {
    let scored = score_video(features, partition, model)?;
    Ok(Localizations {
        video_id: features.video_id.clone(),
        k,
        segments: localize(&scored, k, all_segments)?,
    })
}

/// Metrics of segment predictions against labels derived from annotations.
pub fn evaluate_predictions(
    preds: &Predictions,
    annotations: &Annotations,
    partition: &Partition,
) -> Result<MetricsReport> {
    let labels = derive_segment_labels(annotations, partition)?;
    if preds.segments.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predicted segments but the partition has {}",
            preds.segments.len(),
            labels.len()
        )));
    }
    let spans: Vec<(usize, usize)> = partition.spans().collect();
    for (p, &(s, e)) in preds.segments.iter().zip(&spans) {
        if (p.start, p.end) != (s, e) {
            return Err(Error::Usage(format!(
                "prediction for segment {} spans [{}, {}) but the partition has [{s}, {e})",
                p.segment_id, p.start, p.end
            )));
        }
    }
    weighted_metrics(&confusion(&preds.labels(), &labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(RunConfig::from_json("{}").is_ok());
        let err = RunConfig::from_json(r#"{"trian": {}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::from_json(r#"{"train": {"learning_rat": 0.1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"ks": [3, 2]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"features": ["/nonexistent/x.cegf"]}"#).is_err());
        let cfg =
            RunConfig::from_json(r#"{"model": {"aggregator_kind": "mean", "hidden_dims": [8]}}"#)
                .unwrap();
        assert_eq!(cfg.model.aggregator_kind, AggregatorKind::Mean);
    }

    #[test]
    fn batch_shares_offset_pattern() {
        let cfg = SynthConfig {
            segment_count: 4,
            ..SynthConfig::default()
        };
        let vids = synth_batch(&cfg, 3).unwrap();
        assert_eq!(vids.len(), 3);
        assert_ne!(vids[0].features, vids[1].features);
        let ids: Vec<&str> = vids.iter().map(|v| v.features.video_id.as_str()).collect();
        assert_eq!(ids, vec!["synth-7", "synth-8", "synth-9"]);
    }
}
