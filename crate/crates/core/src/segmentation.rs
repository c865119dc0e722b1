//! Penalized change-point segmentation (PELT) with an unpruned dynamic
//! programming oracle.
//!
//! Both solvers minimise
//!
//! ```text
//! Σ_j cost(b_j, b_{j+1}) + β · (number of interior boundaries)
//! ```
//!
//! where `cost` is the Gaussian mean-shift cost: the squared L2 deviation of
//! each frame from its segment mean, summed over feature dimensions.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{write_atomic, FeatureMatrix};
use crate::error::{Error, Result};

/// Largest sequence the unpruned oracle accepts.
pub const ORACLE_MAX_FRAMES: usize = 500;

/// Ordered segment boundaries `0 = b_0 < b_1 < … < b_k = T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    boundaries: Vec<usize>,
}

impl Partition {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.len() < 2 || boundaries[0] != 0 {
            return Err(Error::Usage(format!(
                "partition boundaries must start at 0 and contain at least two entries: {boundaries:?}"
            )));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Usage(format!(
                "partition boundaries must be strictly increasing: {boundaries:?}"
            )));
        }
        Ok(Self { boundaries })
    }

    pub fn single(frame_count: usize) -> Self {
        Self {
            boundaries: vec![0, frame_count],
        }
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn frame_count(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn segment_count(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Half-open `[start, end)` frame ranges.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.boundaries.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn segment_of(&self, frame: usize) -> Option<usize> {
        if frame >= self.frame_count() {
            return None;
        }
        Some(self.boundaries.partition_point(|&b| b <= frame) - 1)
    }

    pub fn min_segment_len(&self) -> usize {
        self.spans().map(|(s, e)| e - s).min().unwrap()
    }
}

/// On-disk partition document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionFile {
    pub video_id: String,
    pub boundaries: Vec<usize>,
}

pub fn read_partition(path: &Path) -> Result<(String, Partition)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: PartitionFile = serde_json::from_str(&text)?;
    Ok((doc.video_id, Partition::new(doc.boundaries)?))
}

pub fn write_partition(video_id: &str, partition: &Partition, path: &Path) -> Result<()> {
    let doc = PartitionFile {
        video_id: video_id.to_string(),
        boundaries: partition.boundaries.clone(),
    };
    write_atomic(path, serde_json::to_string(&doc)?.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    #[default]
    GaussianMeanL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    /// Per-boundary penalty β; `None` selects `2·d·ln T`.
    pub penalty: Option<f64>,
    pub min_len: usize,
    pub cost_kind: CostKind,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            penalty: None,
            min_len: 5,
            cost_kind: CostKind::GaussianMeanL2,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 {
            return Err(Error::Config("min_len must be >= 1".into()));
        }
        if let Some(beta) = self.penalty {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::Config(format!(
                    "penalty must be positive and finite, got {beta}"
                )));
            }
        }
        Ok(())
    }

    pub fn resolved_penalty(&self, frame_count: usize, feature_dim: usize) -> f64 {
        self.penalty.unwrap_or_else(|| {
            let beta = 2.0 * feature_dim as f64 * (frame_count as f64).ln();
            if beta > 0.0 {
                beta
            } else {
                1.0
            }
        })
    }
}

/// Prefix sums backing O(d) segment costs.
#[derive(Debug, Clone)]
pub struct CostTable {
    dim: usize,
    /// `(T+1)·d` running sums of frame vectors.
    sums: Vec<f64>,
    /// `T+1` running sums of squared norms.
    sq: Vec<f64>,
}

impl CostTable {
    pub fn new(f: &FeatureMatrix) -> Self {
        let (t, d) = (f.frame_count(), f.feature_dim());
        let mut sums = vec![0.0; (t + 1) * d];
        let mut sq = vec![0.0; t + 1];
        for i in 0..t {
            let x = f.frame(i);
            let (prev, next) = sums.split_at_mut((i + 1) * d);
            let prev = &prev[i * d..];
            for k in 0..d {
                next[k] = prev[k] + x[k];
            }
            sq[i + 1] = sq[i] + x.iter().map(|v| v * v).sum::<f64>();
        }
        Self { dim: d, sums, sq }
    }

    pub fn frame_count(&self) -> usize {
        self.sq.len() - 1
    }

    /// `Σ‖x_t‖² − ‖Σx_t‖²/n` over `[s, e)`, clamped at zero.
    pub fn cost(&self, s: usize, e: usize) -> f64 {
        debug_assert!(s < e && e <= self.frame_count());
        let n = (e - s) as f64;
        let d = self.dim;
        let mut mean_sq = 0.0;
        for k in 0..d {
            let v = self.sums[e * d + k] - self.sums[s * d + k];
            mean_sq += v * v;
        }
        (self.sq[e] - self.sq[s] - mean_sq / n).max(0.0)
    }
}

/// Squared deviation of frames `[s, e)` from their mean.
pub fn segment_cost(f: &FeatureMatrix, s: usize, e: usize) -> Result<f64> {
    if s >= e || e > f.frame_count() {
        return Err(Error::Usage(format!(
            "segment [{s}, {e}) is empty or exceeds {} frames",
            f.frame_count()
        )));
    }
    Ok(CostTable::new(&f.slice(s, e)).cost(0, e - s))
}

/// Penalized objective of a partition under the given penalty.
pub fn partition_objective(table: &CostTable, partition: &Partition, penalty: f64) -> f64 {
    let mut total = -penalty;
    for (s, e) in partition.spans() {
        total += table.cost(s, e) + penalty;
    }
    total
}

/// DP state at one time index.
#[derive(Debug, Clone, Copy)]
struct Best {
    value: f64,
    boundaries: usize,
    last: usize,
}

/// Lexicographic preference: lower objective, then fewer boundaries, then an
/// earlier last boundary.
fn better(candidate: &Best, incumbent: &Option<Best>) -> bool {
    match incumbent {
        None => true,
        Some(b) => match candidate.value.total_cmp(&b.value) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => (candidate.boundaries, candidate.last) < (b.boundaries, b.last),
        },
    }
}

fn backtrack(best: &[Option<Best>], t: usize) -> Partition {
    let mut b = vec![t];
    let mut cur = t;
    while cur > 0 {
        cur = best[cur].expect("reachable state").last;
        b.push(cur);
    }
    b.reverse();
    Partition { boundaries: b }
}

fn candidate_at(
    best: &[Option<Best>],
    table: &CostTable,
    s: usize,
    t: usize,
    beta: f64,
) -> Option<Best> {
    let prev = best[s]?;
    Some(Best {
        value: prev.value + table.cost(s, t) + beta,
        boundaries: prev.boundaries + usize::from(s > 0),
        last: s,
    })
}

/// Exact penalized segmentation with PELT pruning.
///
/// A candidate `s` is pruned once `F(s) + cost(s, t) > F(t)`. Since the
/// mean-shift cost satisfies `cost(s, e) ≥ cost(s, m) + cost(m, e)`, a pruned
/// candidate can never beat `t` for any later end `≥ t + min_len`; it is kept
/// alive for the `min_len − 1` ends in between where `t` is not yet usable.
pub fn pelt(f: &FeatureMatrix, cfg: &SegmentationConfig) -> Result<Partition> {
    cfg.validate()?;
    let t_total = f.frame_count();
    let min_len = cfg.min_len;
    if t_total < 2 * min_len {
        return Ok(Partition::single(t_total));
    }
    let beta = cfg.resolved_penalty(t_total, f.feature_dim());
    let table = CostTable::new(f);

    let mut best: Vec<Option<Best>> = vec![None; t_total + 1];
    best[0] = Some(Best {
        value: -beta,
        boundaries: 0,
        last: 0,
    });
    // (candidate start, time at which it became prunable)
    let mut candidates: Vec<(usize, Option<usize>)> = Vec::new();

    for t in min_len..=t_total {
        let newest = t - min_len;
        if best[newest].is_some() {
            candidates.push((newest, None));
        }
        // Candidates are kept in ascending order of start, as in the oracle.
        let mut cur: Option<Best> = None;
        for &(s, _) in &candidates {
            if let Some(c) = candidate_at(&best, &table, s, t, beta) {
                if better(&c, &cur) {
                    cur = Some(c);
                }
            }
        }
        best[t] = cur;
        let Some(ft) = cur.map(|b| b.value) else {
            continue;
        };
        candidates.retain_mut(|(s, pruned_at)| {
            if let Some(p) = *pruned_at {
                return t < p + min_len;
            }
            let reach = best[*s].unwrap().value + table.cost(*s, t);
            if reach > ft {
                *pruned_at = Some(t);
            }
            true
        });
    }
    Ok(backtrack(&best, t_total))
}

/// Globally optimal penalized partition by full O(T²) dynamic programming.
pub fn optimal_partition_oracle(f: &FeatureMatrix, cfg: &SegmentationConfig) -> Result<Partition> {
    cfg.validate()?;
    let t_total = f.frame_count();
    if t_total > ORACLE_MAX_FRAMES {
        return Err(Error::Usage(format!(
            "oracle is limited to {ORACLE_MAX_FRAMES} frames, got {t_total}"
        )));
    }
    let min_len = cfg.min_len;
    if t_total < 2 * min_len {
        return Ok(Partition::single(t_total));
    }
    let beta = cfg.resolved_penalty(t_total, f.feature_dim());
    let table = CostTable::new(f);
    let mut best: Vec<Option<Best>> = vec![None; t_total + 1];
    best[0] = Some(Best {
        value: -beta,
        boundaries: 0,
        last: 0,
    });
    for t in min_len..=t_total {
        let mut cur: Option<Best> = None;
        for s in 0..=t - min_len {
            if let Some(c) = candidate_at(&best, &table, s, t, beta) {
                if better(&c, &cur) {
                    cur = Some(c);
                }
            }
        }
        best[t] = cur;
    }
    Ok(backtrack(&best, t_total))
}

/// Splits a video into per-segment feature matrices in temporal order.
pub fn split_video(f: &FeatureMatrix, p: &Partition) -> Result<Vec<FeatureMatrix>> {
    if p.frame_count() != f.frame_count() {
        return Err(Error::Usage(format!(
            "partition covers {} frames but the video has {}",
            p.frame_count(),
            f.frame_count()
        )));
    }
    Ok(p.spans().map(|(s, e)| f.slice(s, e)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DenseMatrix, SeededRng};
    use proptest::prelude::*;

    fn seq(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        FeatureMatrix::new("s", DenseMatrix::from_rows(&rows).unwrap()).unwrap()
    }

    fn random_seq(rng: &mut SeededRng, t: usize, d: usize) -> FeatureMatrix {
        // Piecewise-constant means plus noise so that splits actually occur.
        let mut rows = Vec::with_capacity(t);
        let mut mean: Vec<f64> = (0..d).map(|_| rng.normal() * 3.0).collect();
        for _ in 0..t {
            if rng.below(8) == 0 {
                mean = (0..d).map(|_| rng.normal() * 3.0).collect();
            }
            rows.push(mean.iter().map(|m| m + rng.normal()).collect());
        }
        seq(rows)
    }

    fn naive_cost(f: &FeatureMatrix, s: usize, e: usize) -> f64 {
        let d = f.feature_dim();
        let n = (e - s) as f64;
        let mut mean = vec![0.0; d];
        for t in s..e {
            for (m, x) in mean.iter_mut().zip(f.frame(t)) {
                *m += x / n;
            }
        }
        (s..e)
            .map(|t| {
                (0..d)
                    .map(|k| (f.frame(t)[k] - mean[k]).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    fn cfg(beta: f64, min_len: usize) -> SegmentationConfig {
        SegmentationConfig {
            penalty: Some(beta),
            min_len,
            ..Default::default()
        }
    }

    #[test]
    fn cost_examples() {
        let same = seq(vec![vec![1.5, -2.0]; 3]);
        assert_eq!(segment_cost(&same, 0, 3).unwrap(), 0.0);
        let two = seq(vec![vec![0.0], vec![2.0]]);
        assert!((segment_cost(&two, 0, 2).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(segment_cost(&two, 1, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn splitting_never_increases_cost() {
        let mut rng = SeededRng::new(5);
        for _ in 0..50 {
            let t = 2 + rng.below(20);
            let f = seq((0..t).map(|_| vec![rng.normal()]).collect());
            let table = CostTable::new(&f);
            for s in 0..t {
                for e in s + 2..=t {
                    for m in s + 1..e {
                        assert!(table.cost(s, e) + 1e-9 >= table.cost(s, m) + table.cost(m, e));
                    }
                }
            }
        }
    }

    #[test]
    fn constant_sequence_is_one_segment() {
        let f = seq(vec![vec![3.0, 1.0]; 10]);
        for beta in [1e-3, 1.0, 100.0] {
            assert_eq!(pelt(&f, &cfg(beta, 1)).unwrap().boundaries(), &[0, 10]);
        }
    }

    #[test]
    fn step_sequence_splits() {
        let mut rows = vec![vec![0.0]; 5];
        rows.extend(vec![vec![10.0]; 5]);
        let f = seq(rows);
        let c = cfg(1.0, 1);
        assert_eq!(pelt(&f, &c).unwrap().boundaries(), &[0, 5, 10]);
        assert_eq!(
            optimal_partition_oracle(&f, &c).unwrap().boundaries(),
            &[0, 5, 10]
        );
        let table = CostTable::new(&f);
        let split = partition_objective(&table, &Partition::new(vec![0, 5, 10]).unwrap(), 1.0);
        let whole = partition_objective(&table, &Partition::single(10), 1.0);
        assert!((split - 1.0).abs() < 1e-12);
        assert!((whole - 250.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_edge_cases() {
        let one = seq(vec![vec![1.0]]);
        assert_eq!(
            optimal_partition_oracle(&one, &cfg(1.0, 1))
                .unwrap()
                .boundaries(),
            &[0, 1]
        );
        let mut rng = SeededRng::new(3);
        let f = random_seq(&mut rng, 30, 2);
        assert_eq!(
            optimal_partition_oracle(&f, &cfg(1e12, 1))
                .unwrap()
                .boundaries(),
            &[0, 30]
        );
        let big = seq(vec![vec![0.0]; ORACLE_MAX_FRAMES + 1]);
        assert!(optimal_partition_oracle(&big, &cfg(1.0, 1)).is_err());
    }

    #[test]
    fn short_input_is_trivial() {
        let f = seq(vec![vec![0.0], vec![9.0], vec![0.0]]);
        assert_eq!(pelt(&f, &cfg(0.1, 2)).unwrap().boundaries(), &[0, 3]);
    }

    #[test]
    fn pelt_matches_oracle_on_random_sequences() {
        let mut rng = SeededRng::new(2024);
        for _ in 0..100 {
            let t = 1 + rng.below(40);
            let d = 1 + rng.below(4);
            let f = random_seq(&mut rng, t, d);
            let c = cfg(rng.uniform(0.5, 30.0), 1 + rng.below(4));
            let a = pelt(&f, &c).unwrap();
            let b = optimal_partition_oracle(&f, &c).unwrap();
            let table = CostTable::new(&f);
            let beta = c.penalty.unwrap();
            assert_eq!(
                partition_objective(&table, &a, beta),
                partition_objective(&table, &b, beta)
            );
            assert_eq!(a, b);
            assert!(a.segment_count() == 1 || a.min_segment_len() >= c.min_len);
        }
    }

    #[test]
    fn default_penalty_is_bic_like() {
        let c = SegmentationConfig::default();
        assert!((c.resolved_penalty(100, 3) - 6.0 * 100f64.ln()).abs() < 1e-12);
        assert_eq!(c.min_len, 5);
    }

    #[test]
    fn split_examples() {
        let f = seq((0..4).map(|i| vec![i as f64]).collect());
        let parts = split_video(&f, &Partition::new(vec![0, 2, 4]).unwrap()).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].data().as_slice(), &[2.0, 3.0]);
        let whole = split_video(&f, &Partition::single(4)).unwrap();
        assert_eq!(whole[0].data(), f.data());
        assert!(split_video(&f, &Partition::single(5)).is_err());
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(vec![1, 3]).is_err());
        assert!(Partition::new(vec![0, 2, 2]).is_err());
        assert!(Partition::new(vec![0]).is_err());
        let p = Partition::new(vec![0, 3, 7]).unwrap();
        assert_eq!(p.segment_of(0), Some(0));
        assert_eq!(p.segment_of(3), Some(1));
        assert_eq!(p.segment_of(7), None);
    }

    proptest! {
        #[test]
        fn prefix_cost_matches_naive(seed in any::<u64>(), t in 1usize..25, d in 1usize..5) {
            let mut rng = SeededRng::new(seed);
            let f = random_seq(&mut rng, t, d);
            let table = CostTable::new(&f);
            for s in 0..t {
                for e in s + 1..=t {
                    let a = table.cost(s, e);
                    let b = naive_cost(&f, s, e);
                    prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
                }
            }
        }

        #[test]
        fn more_penalty_fewer_boundaries(seed in any::<u64>(), t in 2usize..40, beta in 0.1f64..20.0) {
            let mut rng = SeededRng::new(seed);
            let f = random_seq(&mut rng, t, 2);
            let lo = pelt(&f, &cfg(beta, 2)).unwrap();
            let hi = pelt(&f, &cfg(beta * 3.0, 2)).unwrap();
            prop_assert!(hi.segment_count() <= lo.segment_count());
        }

        #[test]
        fn split_concat_round_trip(seed in any::<u64>(), t in 10usize..60) {
            let mut rng = SeededRng::new(seed);
            let f = random_seq(&mut rng, t, 3);
            let p = pelt(&f, &cfg(5.0, 3)).unwrap();
            let parts = split_video(&f, &p).unwrap();
            let joined: Vec<f64> = parts.iter().flat_map(|m| m.data().as_slice().to_vec()).collect();
            prop_assert_eq!(joined.as_slice(), f.data().as_slice());
        }
    }
}
