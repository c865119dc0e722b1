//! Feature files, annotations, weak segment labels and the synthetic video
//! generator.
//!
//! Feature matrices are held as `f64` in memory and stored as 32-bit floats
//! on disk. The generator rounds every value through `f32` so that a
//! synthetic video survives a CEGF round-trip unchanged.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm2, DenseMatrix, SeededRng};
use crate::segmentation::Partition;

pub const CEGF_MAGIC: &[u8; 4] = b"CEGF";
pub const CEGF_VERSION: u32 = 1;
pub const CEGF_HEADER_LEN: usize = 24;

/// Per-frame feature sequence of one video: row `t` is frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub video_id: String,
    data: DenseMatrix,
}

impl FeatureMatrix {
    pub fn new(video_id: impl Into<String>, data: DenseMatrix) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::Usage(format!(
                "feature matrix must be non-empty, got {}x{}",
                data.rows(),
                data.cols()
            )));
        }
        if !data.all_finite() {
            // from_vec reports the position
            DenseMatrix::from_vec(data.rows(), data.cols(), data.as_slice().to_vec())?;
        }
        Ok(Self {
            video_id: video_id.into(),
            data,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.data.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.data.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.data.row(t)
    }

    pub fn data(&self) -> &DenseMatrix {
        &self.data
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice(&self, start: usize, end: usize) -> FeatureMatrix {
        FeatureMatrix {
            video_id: self.video_id.clone(),
            data: self.data.slice_rows(start, end),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Cegf,
    Csv,
}

impl FeatureFormat {
    /// `.csv` files are CSV; everything else is treated as CEGF.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Cegf,
        }
    }
}

pub fn read_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let video_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let data = match FeatureFormat::from_path(path) {
        FeatureFormat::Cegf => decode_cegf(&bytes)?,
        FeatureFormat::Csv => parse_csv(&String::from_utf8_lossy(&bytes))?,
    };
    FeatureMatrix::new(video_id, data)
}

pub fn write_feature_matrix(m: &FeatureMatrix, path: &Path, format: FeatureFormat) -> Result<()> {
    let bytes = match format {
        FeatureFormat::Cegf => encode_cegf(&m.data)?,
        FeatureFormat::Csv => format_csv(&m.data)?.into_bytes(),
    };
    write_atomic(path, &bytes)
}

fn to_f32(v: f64, row: usize, col: usize) -> Result<f32> {
    let x = v as f32;
    if !x.is_finite() {
        return Err(Error::Data {
            row,
            col,
            detail: format!("{v} is not representable as a finite 32-bit float"),
        });
    }
    Ok(x)
}

/// Encodes a matrix as a CEGF byte stream.
pub fn encode_cegf(m: &DenseMatrix) -> Result<Vec<u8>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Usage("cannot encode an empty feature matrix".into()));
    }
    let mut out = Vec::with_capacity(CEGF_HEADER_LEN + 4 * m.rows() * m.cols());
    out.extend_from_slice(CEGF_MAGIC);
    out.extend_from_slice(&CEGF_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for (i, &v) in m.as_slice().iter().enumerate() {
        let x = to_f32(v, i / m.cols(), i % m.cols())?;
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cegf(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < CEGF_HEADER_LEN {
        return Err(Error::Length {
            expected: CEGF_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if &bytes[0..4] != CEGF_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"CEGF\"",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CEGF_VERSION {
        return Err(Error::Format(format!("unsupported CEGF version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(CEGF_HEADER_LEN as u64))
        .ok_or_else(|| Error::Format(format!("header dimensions {rows}x{cols} overflow")))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len() as u64,
        });
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let values: Vec<f64> = bytes[CEGF_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DenseMatrix::from_vec(rows, cols, values)
}

fn parse_csv(text: &str) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(c, field)| {
                let x: f32 = field.trim().parse().map_err(|_| Error::Data {
                    row: r,
                    col: c,
                    detail: format!("cannot parse {:?} as a real", field.trim()),
                })?;
                if !x.is_finite() {
                    return Err(Error::Data {
                        row: r,
                        col: c,
                        detail: "non-finite value".into(),
                    });
                }
                Ok(x as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Shape(format!(
                    "CSV row {r} has {} fields, expected {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    DenseMatrix::from_rows(&rows)
}

fn format_csv(m: &DenseMatrix) -> Result<String> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Usage("cannot encode an empty feature matrix".into()));
    }
    let mut out = String::new();
    for (r, row) in m.row_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&to_f32(v, r, c)?.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes through a sibling temporary file so a failed write never leaves a
/// partial artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Ground-truth annotations for one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotations {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl Annotations {
    pub fn validate(&self, frame_count: Option<usize>) -> Result<()> {
        if let Some(labels) = &self.frame_labels {
            if let Some(pos) = labels.iter().position(|&l| l > 1) {
                return Err(Error::Data {
                    row: pos,
                    col: 0,
                    detail: format!("frame label {} is not 0 or 1", labels[pos]),
                });
            }
            if let Some(t) = frame_count {
                if labels.len() != t {
                    return Err(Error::Shape(format!(
                        "{} frame labels for {t} frames",
                        labels.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Result<&[u8]> {
        self.frame_labels.as_deref().ok_or_else(|| {
            Error::Usage(format!(
                "annotations for {:?} carry no frame labels",
                self.video_id
            ))
        })
    }
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ann: Annotations = serde_json::from_str(&text)?;
    ann.validate(None)?;
    Ok(ann)
}

pub fn write_annotations(ann: &Annotations, path: &Path) -> Result<()> {
    write_atomic(path, serde_json::to_string(ann)?.as_bytes())
}

/// Weak segment labels under the multiple-instance rule: a segment is
/// abnormal iff it contains at least one abnormal frame.
pub fn derive_segment_labels(ann: &Annotations, partition: &Partition) -> Result<Vec<u8>> {
    let labels = ann.labels()?;
    if labels.len() != partition.frame_count() {
        return Err(Error::Shape(format!(
            "{} frame labels for a partition of {} frames",
            labels.len(),
            partition.frame_count()
        )));
    }
    Ok(partition
        .spans()
        .map(|(s, e)| u8::from(labels[s..e].contains(&1)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub segment_count: usize,
    pub mean_segment_len: usize,
    pub min_segment_len: usize,
    pub feature_dim: usize,
    pub abnormal_segment_fraction: f64,
    pub abnormal_frame_fraction: f64,
    /// Scale of the isotropic Gaussian the segment means are drawn from.
    pub mean_scale: f64,
    pub cluster_spread: f64,
    pub abnormal_offset_norm: f64,
    pub seed: u64,
    /// Seed of the abnormal offset direction. Videos that share it share one
    /// abnormality pattern; defaults to `seed`.
    pub offset_seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            segment_count: 40,
            mean_segment_len: 20,
            min_segment_len: 5,
            feature_dim: 16,
            abnormal_segment_fraction: 0.3,
            abnormal_frame_fraction: 0.2,
            mean_scale: 1.0,
            cluster_spread: 0.1,
            abnormal_offset_norm: 1.0,
            seed: 7,
            offset_seed: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.segment_count < 2 {
            return bad(format!(
                "segment_count must be >= 2, got {}",
                self.segment_count
            ));
        }
        if self.min_segment_len == 0 {
            return bad("min_segment_len must be >= 1".into());
        }
        if self.mean_segment_len < self.min_segment_len {
            return bad(format!(
                "mean_segment_len {} is below the minimum segment length {}",
                self.mean_segment_len, self.min_segment_len
            ));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.abnormal_segment_fraction) {
            return bad("abnormal_segment_fraction must lie in [0, 1]".into());
        }
        if !(self.abnormal_frame_fraction > 0.0 && self.abnormal_frame_fraction <= 1.0) {
            return bad("abnormal_frame_fraction must lie in (0, 1]".into());
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return bad("cluster_spread must be > 0".into());
        }
        if !(self.abnormal_offset_norm >= 0.0 && self.abnormal_offset_norm.is_finite()) {
            return bad("abnormal_offset_norm must be >= 0".into());
        }
        if !(self.mean_scale >= 0.0 && self.mean_scale.is_finite()) {
            return bad("mean_scale must be >= 0".into());
        }
        Ok(())
    }
}

/// A video with its annotations and temporal partition.
#[derive(Debug, Clone)]
pub struct LabeledVideo {
    pub features: FeatureMatrix,
    pub annotations: Annotations,
    pub partition: Partition,
}

/// A generated video with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub features: FeatureMatrix,
    pub annotations: Annotations,
    pub partition: Partition,
    /// Indices of the segments that received abnormal frames.
    pub abnormal_segments: Vec<usize>,
}

/// Generates a piecewise-stationary video with planted abnormal frames.
///
/// Segment lengths are `min_len + Poisson(mean − min_len)` clamped to
/// `[min_len, 3·mean]`. Each segment mean is `mean_scale · N(0, I)`; frames
/// add `cluster_spread · N(0, I)` noise. In abnormal segments a random,
/// generally non-contiguous subset of `round(abnormal_frame_fraction · len)`
/// frames (at least one) is shifted by a fixed offset of norm
/// `abnormal_offset_norm`.
pub fn synth_video(cfg: &SynthConfig) -> Result<SynthVideo> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let min_len = cfg.min_segment_len;
    let max_len = 3 * cfg.mean_segment_len;

    let mut offset_rng = SeededRng::derived(cfg.offset_seed.unwrap_or(cfg.seed), 1);
    let mut direction: Vec<f64> = (0..d).map(|_| offset_rng.normal()).collect();
    let n = norm2(&direction);
    direction
        .iter_mut()
        .for_each(|v| *v *= cfg.abnormal_offset_norm / n);

    let mut rng = SeededRng::derived(cfg.seed, 0);
    let extra = (cfg.mean_segment_len - min_len) as f64;
    let lengths: Vec<usize> = (0..cfg.segment_count)
        .map(|_| {
            let draw = if extra > 0.0 {
                rng.sample(&Poisson::new(extra).expect("positive Poisson rate")) as usize
            } else {
                0
            };
            (min_len + draw).clamp(min_len, max_len)
        })
        .collect();

    let abnormal_count =
        (cfg.abnormal_segment_fraction * cfg.segment_count as f64).round() as usize;
    let mut order: Vec<usize> = (0..cfg.segment_count).collect();
    rng.shuffle(&mut order);
    let mut abnormal_segments: Vec<usize> = order[..abnormal_count].to_vec();
    abnormal_segments.sort_unstable();

    let total: usize = lengths.iter().sum();
    let mut values = Vec::with_capacity(total * d);
    let mut frame_labels = vec![0u8; total];
    let mut boundaries = vec![0];
    let mut start = 0;
    for (s, &len) in lengths.iter().enumerate() {
        let mean: Vec<f64> = (0..d).map(|_| cfg.mean_scale * rng.normal()).collect();
        let mut planted = vec![false; len];
        if abnormal_segments.binary_search(&s).is_ok() {
            let k = ((cfg.abnormal_frame_fraction * len as f64).round() as usize).clamp(1, len);
            let mut idx: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut idx);
            for &i in &idx[..k] {
                planted[i] = true;
            }
        }
        for (i, &abnormal) in planted.iter().enumerate() {
            for (k, &m) in mean.iter().enumerate() {
                let mut v = m + cfg.cluster_spread * rng.normal();
                if abnormal {
                    v += direction[k];
                }
                values.push(v as f32 as f64);
            }
            if abnormal {
                frame_labels[start + i] = 1;
            }
        }
        start += len;
        boundaries.push(start);
    }

    let video_id = format!("synth-{}", cfg.seed);
    let features = FeatureMatrix::new(video_id.clone(), DenseMatrix::from_vec(total, d, values)?)?;
    Ok(SynthVideo {
        features,
        annotations: Annotations {
            video_id,
            frame_labels: Some(frame_labels),
            notes: Some(format!(
                "synthetic: {} segments, {} abnormal",
                cfg.segment_count, abnormal_count
            )),
        },
        partition: Partition::new(boundaries)?,
        abnormal_segments,
    })
}
