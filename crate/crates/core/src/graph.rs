//! Complete weighted graphs over the frames of one segment.

use serde::{Deserialize, Serialize};

use crate::dataio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    Correlation,
    EuclideanRbf,
    KnnCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RbfBandwidth {
    MedianHeuristic,
    Explicit(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    pub metric: SimilarityMetric,
    pub knn_k: usize,
    pub rbf_sigma: RbfBandwidth,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            metric: SimilarityMetric::Cosine,
            knn_k: 5,
            rbf_sigma: RbfBandwidth::MedianHeuristic,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.metric == SimilarityMetric::KnnCosine && self.knn_k == 0 {
            return Err(Error::Config("knn_k must be >= 1".into()));
        }
        if let RbfBandwidth::Explicit(s) = self.rbf_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "rbf_sigma must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// One segment as a graph: nodes are frames in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGraph {
    node_features: DenseMatrix,
    edge_weights: DenseMatrix,
    pub global_frame_offset: usize,
    pub weak_label: Option<u8>,
}

impl SegmentGraph {
    /// Checks symmetry, zero diagonal and the `[0, 1]` weight range.
    pub fn new(
        node_features: DenseMatrix,
        edge_weights: DenseMatrix,
        global_frame_offset: usize,
        weak_label: Option<u8>,
    ) -> Result<Self> {
        let n = node_features.rows();
        if n == 0 {
            return Err(Error::Usage("graph needs at least one node".into()));
        }
        if edge_weights.rows() != n || edge_weights.cols() != n {
            return Err(Error::Shape(format!(
                "{}x{} edge weights for {n} nodes",
                edge_weights.rows(),
                edge_weights.cols()
            )));
        }
        for i in 0..n {
            if edge_weights[(i, i)] != 0.0 {
                return Err(Error::Usage(format!("self-loop on node {i}")));
            }
            for j in 0..n {
                let w = edge_weights[(i, j)];
                if !(0.0..=1.0).contains(&w) || w != edge_weights[(j, i)] {
                    return Err(Error::Usage(format!(
                        "edge ({i}, {j}) weight {w} is out of range or asymmetric"
                    )));
                }
            }
        }
        if matches!(weak_label, Some(l) if l > 1) {
            return Err(Error::Usage("weak label must be 0 or 1".into()));
        }
        Ok(Self {
            node_features,
            edge_weights,
            global_frame_offset,
            weak_label,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn node_features(&self) -> &DenseMatrix {
        &self.node_features
    }

    pub fn edge_weights(&self) -> &DenseMatrix {
        &self.edge_weights
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.edge_weights[(i, j)]
    }

    /// Neighbours of `i` with positive weight, in ascending index order.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.edge_weights
            .row(i)
            .iter()
            .enumerate()
            .filter(|&(_, &w)| w > 0.0)
            .map(|(j, &w)| (j, w))
    }

    /// Global frame indices covered by this graph.
    pub fn frame_range(&self) -> std::ops::Range<usize> {
        self.global_frame_offset..self.global_frame_offset + self.node_count()
    }

    /// Reorders nodes: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<SegmentGraph> {
        let n = self.node_count();
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Usage("not a permutation of the node set".into()));
        }
        let mut x = DenseMatrix::zeros(n, self.feature_dim());
        let mut w = DenseMatrix::zeros(n, n);
        for (a, &pa) in perm.iter().enumerate() {
            x.row_mut(a).copy_from_slice(self.node_features.row(pa));
            for (b, &pb) in perm.iter().enumerate() {
                w[(a, b)] = self.edge_weights[(pa, pb)];
            }
        }
        SegmentGraph::new(x, w, self.global_frame_offset, self.weak_label)
    }
}

/// Cosine similarity clamped below at zero. A zero-norm vector has
/// similarity 0 with everything.
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(raw_cosine(x, y).max(0.0))
}

fn raw_cosine(x: &[f64], y: &[f64]) -> f64 {
    let denom = norm2(x) * norm2(y);
    if denom == 0.0 {
        log::debug!("zero-norm frame vector; similarity set to 0");
        return 0.0;
    }
    (dot(x, y) / denom).clamp(-1.0, 1.0)
}

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

fn symmetric_fill(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> DenseMatrix {
    let mut w = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = f(i, j);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    w
}

/// Pairwise edge weights: symmetric, zero diagonal, entries in `[0, 1]`.
pub fn similarity_matrix(segment: &FeatureMatrix, cfg: &SimilarityConfig) -> Result<DenseMatrix> {
    cfg.validate()?;
    let n = segment.frame_count();
    if n == 0 {
        return Err(Error::Usage(
            "cannot build a similarity matrix over zero frames".into(),
        ));
    }
    let x = segment.data();
    let w = match cfg.metric {
        SimilarityMetric::Cosine => {
            symmetric_fill(n, |i, j| raw_cosine(x.row(i), x.row(j)).max(0.0))
        }
        SimilarityMetric::Correlation => {
            let c: Vec<Vec<f64>> = x.row_iter().map(centered).collect();
            symmetric_fill(n, |i, j| raw_cosine(&c[i], &c[j]).max(0.0))
        }
        SimilarityMetric::EuclideanRbf => {
            let dist = symmetric_fill(n, |i, j| {
                x.row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            });
            let sigma = match cfg.rbf_sigma {
                RbfBandwidth::Explicit(s) => s,
                RbfBandwidth::MedianHeuristic => {
                    let pairs: Vec<f64> = (0..n)
                        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                        .map(|(i, j)| dist[(i, j)])
                        .collect();
                    let positive: Vec<f64> = pairs.iter().copied().filter(|&d| d > 0.0).collect();
                    match median(pairs) {
                        Some(m) if m > 0.0 => m,
                        // Mostly duplicate frames: fall back to the positive distances.
                        _ => median(positive).unwrap_or(1.0),
                    }
                }
            };
            symmetric_fill(n, |i, j| {
                (-dist[(i, j)].powi(2) / (2.0 * sigma * sigma)).exp()
            })
        }
        SimilarityMetric::KnnCosine => {
            let full = symmetric_fill(n, |i, j| raw_cosine(x.row(i), x.row(j)).max(0.0));
            let mut keep = vec![false; n * n];
            for i in 0..n {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                // Stable sort keeps earlier frames first among ties.
                others.sort_by(|&a, &b| full[(i, b)].total_cmp(&full[(i, a)]));
                for &j in others.iter().take(cfg.knn_k) {
                    keep[i * n + j] = true;
                    keep[j * n + i] = true;
                }
            }
            symmetric_fill(n, |i, j| if keep[i * n + j] { full[(i, j)] } else { 0.0 })
        }
    };
    Ok(w)
}

pub fn build_graph(
    segment: &FeatureMatrix,
    cfg: &SimilarityConfig,
    offset: usize,
    weak_label: Option<u8>,
) -> Result<SegmentGraph> {
    let w = similarity_matrix(segment, cfg)?;
    SegmentGraph::new(segment.data().clone(), w, offset, weak_label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_video, SynthConfig};
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn frames(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        FeatureMatrix::new("g", DenseMatrix::from_rows(&rows).unwrap()).unwrap()
    }

    fn random_frames(seed: u64, n: usize, d: usize) -> FeatureMatrix {
        let mut rng = SeededRng::new(seed);
        frames(
            (0..n)
                .map(|_| (0..d).map(|_| rng.normal()).collect())
                .collect(),
        )
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let d = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((d - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((raw_cosine(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn identical_frames_fully_connected() {
        let w = similarity_matrix(
            &frames(vec![vec![1.0, 2.0]; 2]),
            &SimilarityConfig::default(),
        )
        .unwrap();
        for (got, want) in w.as_slice().iter().zip([0.0, 1.0, 1.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let g = build_graph(
            &frames(vec![vec![0.5, 0.5, 3.0]; 4]),
            &SimilarityConfig::default(),
            0,
            None,
        )
        .unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.0 } else { 1.0 };
                assert!((g.weight(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singleton_graph() {
        let g = build_graph(
            &frames(vec![vec![1.0, 2.0]]),
            &SimilarityConfig::default(),
            17,
            Some(1),
        )
        .unwrap();
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.neighbors(0).count(), 0);
        assert_eq!(g.frame_range(), 17..18);
    }

    #[test]
    fn matrix_matches_pairwise_cosine() {
        let f = random_frames(4, 4, 5);
        let w = similarity_matrix(&f, &SimilarityConfig::default()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j {
                    0.0
                } else {
                    cosine_similarity(f.frame(i), f.frame(j)).unwrap()
                };
                assert_eq!(w[(i, j)], want);
            }
        }
    }

    #[test]
    fn knn_without_pruning_equals_cosine() {
        let f = random_frames(8, 6, 3);
        let cos = similarity_matrix(&f, &SimilarityConfig::default()).unwrap();
        for k in [5, 6, 50] {
            let knn = similarity_matrix(
                &f,
                &SimilarityConfig {
                    metric: SimilarityMetric::KnnCosine,
                    knn_k: k,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(knn, cos);
        }
    }

    #[test]
    fn knn_keeps_at_least_k_edges() {
        let mut rng = SeededRng::new(12);
        // Positive features keep every cosine strictly positive.
        let f = frames(
            (0..9)
                .map(|_| (0..4).map(|_| rng.uniform(0.1, 1.0)).collect())
                .collect(),
        );
        let cfg = SimilarityConfig {
            metric: SimilarityMetric::KnnCosine,
            knn_k: 2,
            ..Default::default()
        };
        let w = similarity_matrix(&f, &cfg).unwrap();
        for i in 0..9 {
            assert!(w.row(i).iter().filter(|&&v| v > 0.0).count() >= 2);
        }
    }

    #[test]
    fn rbf_median_and_degenerate() {
        let f = frames(vec![vec![0.0], vec![1.0], vec![3.0]]);
        let cfg = SimilarityConfig {
            metric: SimilarityMetric::EuclideanRbf,
            ..Default::default()
        };
        let w = similarity_matrix(&f, &cfg).unwrap();
        // distances 1, 3, 2 → σ = 2
        assert!((w[(0, 1)] - (-1.0f64 / 8.0).exp()).abs() < 1e-15);
        assert!((w[(0, 2)] - (-9.0f64 / 8.0).exp()).abs() < 1e-15);
        let same = similarity_matrix(&frames(vec![vec![2.0]; 3]), &cfg).unwrap();
        assert_eq!(same[(0, 1)], 1.0);
    }

    #[test]
    fn separable_segment_clusters() {
        let v = synth_video(&SynthConfig {
            abnormal_offset_norm: 4.0,
            cluster_spread: 0.2,
            abnormal_segment_fraction: 1.0,
            abnormal_frame_fraction: 0.3,
            mean_scale: 1.0,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let labels = v.annotations.frame_labels.as_ref().unwrap();
        let mut within = (0.0, 0usize);
        let mut across = (0.0, 0usize);
        for (s, e) in v.partition.spans() {
            let g = build_graph(
                &v.features.slice(s, e),
                &SimilarityConfig::default(),
                s,
                None,
            )
            .unwrap();
            for i in 0..g.node_count() {
                for j in 0..g.node_count() {
                    if i == j || labels[s + i] == 1 && labels[s + j] == 1 {
                        continue;
                    }
                    let acc = if labels[s + i] == 0 && labels[s + j] == 0 {
                        &mut within
                    } else {
                        &mut across
                    };
                    acc.0 += g.weight(i, j);
                    acc.1 += 1;
                }
            }
        }
        assert!(within.0 / within.1 as f64 > across.0 / across.1 as f64);
    }

    #[test]
    fn graph_validation() {
        let x = DenseMatrix::zeros(2, 1);
        let asym = DenseMatrix::from_rows(&[vec![0.0, 0.5], vec![0.4, 0.0]]).unwrap();
        assert!(SegmentGraph::new(x.clone(), asym, 0, None).is_err());
        let looped = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 0.0]]).unwrap();
        assert!(SegmentGraph::new(x, looped, 0, None).is_err());
        assert!(similarity_matrix(
            &frames(vec![vec![1.0]]),
            &SimilarityConfig {
                metric: SimilarityMetric::KnnCosine,
                knn_k: 0,
                ..Default::default()
            }
        )
        .is_err());
    }

    fn metric_strategy() -> impl Strategy<Value = SimilarityMetric> {
        prop_oneof![
            Just(SimilarityMetric::Cosine),
            Just(SimilarityMetric::Correlation),
            Just(SimilarityMetric::EuclideanRbf),
            Just(SimilarityMetric::KnnCosine),
        ]
    }

    proptest! {
        #[test]
        fn weights_well_formed(seed in any::<u64>(), n in 1usize..9, d in 1usize..6, metric in metric_strategy(), k in 1usize..5) {
            let f = random_frames(seed, n, d);
            let cfg = SimilarityConfig { metric, knn_k: k, ..Default::default() };
            let w = similarity_matrix(&f, &cfg).unwrap();
            for i in 0..n {
                prop_assert_eq!(w[(i, i)], 0.0);
                for j in 0..n {
                    prop_assert!((0.0..=1.0).contains(&w[(i, j)]));
                    prop_assert_eq!(w[(i, j)], w[(j, i)]);
                }
            }
        }

        #[test]
        fn cosine_scale_invariant(x in prop::collection::vec(-5.0f64..5.0, 3), y in prop::collection::vec(-5.0f64..5.0, 3), a in 0.01f64..100.0, b in 0.01f64..100.0) {
            prop_assume!(norm2(&x) > 1e-3 && norm2(&y) > 1e-3);
            prop_assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
            let ax: Vec<f64> = x.iter().map(|v| v * a).collect();
            let by: Vec<f64> = y.iter().map(|v| v * b).collect();
            prop_assert!((cosine_similarity(&ax, &by).unwrap() - cosine_similarity(&x, &y).unwrap()).abs() <= 1e-12);
        }
    }
}
