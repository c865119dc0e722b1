//! Dense linear algebra, stable activations, seeded randomness and a
//! central-difference gradient checker.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major values, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
                detail: "non-finite value".into(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-column matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies rows `[start, end)` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> DenseMatrix {
        DenseMatrix {
            rows: end - start,
            cols: self.cols,
            values: self.values[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yi) in self.row_iter().zip(y) {
            axpy(yi, r, &mut out);
        }
        out
    }

    /// Accumulates the outer product `scale · u vᵀ` into `self`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            if s != 0.0 {
                axpy(s, v, self.row_mut(i));
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.values[i * self.cols + j]
    }
}

/// Standard matrix product `a · b`.
pub fn gemm(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "gemm: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.values[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a[(i, k)];
            if aik != 0.0 {
                axpy(aik, b.row(k), out_row);
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Logistic function, branching on sign so neither side overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Central-difference gradient `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Usage(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric {
                index: i,
                detail: format!("objective evaluated to {plus} / {minus}"),
            });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Deterministic random stream backed by ChaCha8 (`rand_chacha`).
///
/// ChaCha8 is a counter-based generator whose output depends only on the
/// seed, so equal seeds give bit-identical streams on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from `seed` and a label, e.g. one per video.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn sample<T, D: Distribution<T>>(&mut self, dist: &D) -> T {
        dist.sample(&mut self.inner)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_product(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
        let v = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        DenseMatrix::from_vec(rows, cols, v).unwrap()
    }

    #[test]
    fn gemm_identity_and_selector() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(gemm(&DenseMatrix::identity(2), &m).unwrap(), m);

        let sel = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let col = DenseMatrix::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        assert_eq!(gemm(&sel, &col).unwrap().as_slice(), &[5.0]);
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let mut rng = SeededRng::new(11);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let fast = gemm(&a, &b).unwrap();
        let slow = naive_product(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gemm_rejects_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(gemm(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = DenseMatrix::from_vec(2, 2, vec![0.0, 1.0, f64::NAN, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Data { row: 1, col: 0, .. }));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() <= 1e-15);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() <= 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn softmax_values() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(u.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));

        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() <= 1e-12 && s[1].abs() <= 1e-12);

        let l = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (p, want) in l.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - want).abs() <= 1e-12);
        }

        assert!(matches!(softmax(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn finite_diff_basics() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-6);

        let c = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(c, vec![0.0; 3]);

        let err = finite_diff_grad(
            |t| if t[1] > 1.0 { f64::NAN } else { 0.0 },
            &[0.0, 1.0],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric { index: 1, .. }));
        assert!(finite_diff_grad(|_| 0.0, &[0.0], 0.0).is_err());
    }

    #[test]
    fn rng_reproducible() {
        let mut a = SeededRng::new(99);
        let mut b = SeededRng::new(99);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::derived(99, 1);
        let mut d = SeededRng::derived(99, 2);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    proptest! {
        #[test]
        fn gemm_associative(seed in any::<u64>(), m in 1usize..5, n in 1usize..5, p in 1usize..5, q in 1usize..5) {
            let mut rng = SeededRng::new(seed);
            let a = random_matrix(&mut rng, m, n);
            let b = random_matrix(&mut rng, n, p);
            let c = random_matrix(&mut rng, p, q);
            let left = gemm(&gemm(&a, &b).unwrap(), &c).unwrap();
            let right = gemm(&a, &gemm(&b, &c).unwrap()).unwrap();
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
            }
        }

        #[test]
        fn sigmoid_symmetric(x in -700.0f64..700.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let p = softmax(&v).unwrap();
            prop_assert!(p.iter().all(|&x| x > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
