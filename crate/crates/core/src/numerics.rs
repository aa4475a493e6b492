//! Seeded, deterministic dense linear algebra and statistics primitives.
//!
//! Everything here is plain `f64` row-major storage with no hidden state.
//! The random number generator is ChaCha8 (counter-based, platform-stable):
//! identical seeds produce identical streams on every platform, and
//! independent streams for parallel work are derived by `split`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used by [`cholesky`] when checking symmetry.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Pivots at or below this value fail the positive-definite check.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not symmetric within {SYMMETRY_TOL} at ({row},{col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("data has no variance in any direction")]
    DegenerateData,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix data length {len} does not equal rows*cols = {expected}")]
    BadShape { len: usize, expected: usize },
    #[error("non-finite entry at ({row},{col})")]
    NonFinite { row: usize, col: usize },
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major data. All entries must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadShape {
                len: data.len(),
                expected: rows * cols,
            });
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(NumericsError::NonFinite {
                    row: i / cols.max(1),
                    col: i % cols.max(1),
                });
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Diagonal matrix from the given entries.
    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Stack rows (each slice must have equal length).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::DimensionMismatch {
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Maximum absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Serialize to CSV, row-major, 17 significant decimal digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row: Vec<String> = self.row(r).iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parse the CSV format produced by [`Matrix::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, NumericsError> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|f| f.trim().parse::<f64>().unwrap_or(f64::NAN))
                    .collect()
            })
            .collect();
        Self::from_rows(&rows)
    }
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Return `a` scaled to unit norm. Zero vectors come back unchanged.
pub fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n == 0.0 {
        return a.to_vec();
    }
    a.iter().map(|x| x / n).collect()
}

/// In-place `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cosine of the angle between two vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

// ---------------------------------------------------------------------------
// Seeded RNG
// ---------------------------------------------------------------------------

/// Deterministic RNG wrapper around ChaCha8.
///
/// Identical seeds yield identical streams on every platform. Parallel code
/// must not share one instance; derive independent streams with [`split`].
///
/// [`split`]: SeededRng::split
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent stream. Streams with distinct ids never overlap.
    pub fn split(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner: rng,
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Vector of standard normal draws.
    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.standard_normal()).collect()
    }
}

// ---------------------------------------------------------------------------
// Cholesky
// ---------------------------------------------------------------------------

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with [`NumericsError::NotSymmetric`] if the input is asymmetric
/// beyond [`SYMMETRY_TOL`], and [`NumericsError::NotPositiveDefinite`] if any
/// pivot falls at or below [`PIVOT_TOL`].
pub fn cholesky(m: &Matrix) -> Result<Matrix, NumericsError> {
    check_symmetric(m)?;
    cholesky_with_policy(m, false)
}

/// Cholesky factor for positive *semi*-definite matrices.
///
/// Pivots within `PIVOT_TOL` of zero are treated as exactly zero (the
/// corresponding column of the factor is zeroed), so rank-deficient
/// covariances such as the all-zero matrix factor cleanly. Genuinely
/// negative pivots still fail.
pub fn cholesky_psd(m: &Matrix) -> Result<Matrix, NumericsError> {
    check_symmetric(m)?;
    cholesky_with_policy(m, true)
}

fn check_symmetric(m: &Matrix) -> Result<(), NumericsError> {
    if m.rows() != m.cols() {
        return Err(NumericsError::DimensionMismatch {
            expected: m.rows(),
            got: m.cols(),
        });
    }
    for r in 0..m.rows() {
        for c in (r + 1)..m.cols() {
            if (m.get(r, c) - m.get(c, r)).abs() > SYMMETRY_TOL {
                return Err(NumericsError::NotSymmetric { row: r, col: c });
            }
        }
    }
    Ok(())
}

fn cholesky_with_policy(m: &Matrix, allow_semidefinite: bool) -> Result<Matrix, NumericsError> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m.get(j, j);
        for k in 0..j {
            let v = l.get(j, k);
            diag -= v * v;
        }
        if diag <= PIVOT_TOL {
            if allow_semidefinite && diag > -PIVOT_TOL {
                // Semidefinite direction: leave the column at zero.
                continue;
            }
            return Err(NumericsError::NotPositiveDefinite {
                index: j,
                pivot: diag,
            });
        }
        let djj = diag.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..n {
            let mut v = m.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / djj);
        }
    }
    Ok(l)
}

// ---------------------------------------------------------------------------
// Multivariate normal sampling
// ---------------------------------------------------------------------------

/// Draw `n` i.i.d. samples from N(mean, cov) as an `n x dim` matrix.
///
/// Each row is `mean + L z` with `L` the (semidefinite-tolerant) Cholesky
/// factor of `cov` and `z` standard normal. Zero covariance therefore
/// reproduces the mean exactly. Consumes `dim` normal draws per row in a
/// fixed order, so results are fully determined by the RNG state.
pub fn mvn_sample(
    mean: &[f64],
    cov: &Matrix,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Matrix, NumericsError> {
    let dim = mean.len();
    if cov.rows() != dim || cov.cols() != dim {
        return Err(NumericsError::DimensionMismatch {
            expected: dim,
            got: cov.rows(),
        });
    }
    let l = cholesky_psd(cov)?;
    let mut out = Matrix::zeros(n, dim);
    for r in 0..n {
        let z = rng.normal_vec(dim);
        let row = out.row_mut(r);
        for i in 0..dim {
            let mut v = mean[i];
            for (k, zk) in z.iter().enumerate().take(i + 1) {
                v += l.get(i, k) * zk;
            }
            row[i] = v;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Principal component
// ---------------------------------------------------------------------------

/// First principal component of the rows of `deltas`, as a unit vector.
///
/// Rows are centered by their mean before forming the covariance; the
/// dominant eigenvector comes from a full Jacobi eigendecomposition of the
/// d x d covariance. The sign is oriented so the mean projection of the
/// *original* rows is non-negative; when that projection is within 1e-12
/// of zero the sign follows the first row instead.
pub fn first_principal_component(deltas: &Matrix) -> Result<Vec<f64>, NumericsError> {
    let n = deltas.rows();
    let d = deltas.cols();
    if n < 2 {
        return Err(NumericsError::DegenerateData);
    }

    let mut mean = vec![0.0; d];
    for r in 0..n {
        axpy(1.0, deltas.row(r), &mut mean);
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Centered covariance, normalized by n-1.
    let mut cov = Matrix::zeros(d, d);
    let mut total_var = 0.0;
    for r in 0..n {
        let row = deltas.row(r);
        let centered: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in 0..d {
                let v = cov.get(i, j) + ci * centered[j];
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            let v = cov.get(i, j) / (n as f64 - 1.0);
            cov.set(i, j, v);
            if i == j {
                total_var += v;
            }
        }
    }
    if total_var < 1e-12 {
        return Err(NumericsError::DegenerateData);
    }

    let (eigvals, eigvecs) = jacobi_eigen(&cov);
    let top = eigvals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite eigenvalues"))
        .map(|(i, _)| i)
        .expect("non-empty spectrum");
    let mut pc: Vec<f64> = (0..d).map(|i| eigvecs.get(i, top)).collect();
    pc = normalized(&pc);

    let mean_proj = dot(&mean, &pc);
    let orient = if mean_proj.abs() > 1e-12 {
        mean_proj
    } else {
        dot(deltas.row(0), &pc)
    };
    if orient < 0.0 {
        for v in &mut pc {
            *v = -*v;
        }
    }
    Ok(pc)
}

/// Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns (eigenvalues, eigenvectors-as-columns). Cyclic sweeps over the
/// upper triangle until the off-diagonal norm is negligible. Exact enough
/// for the d <= few-hundred covariances used here.
pub fn jacobi_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a.get(i, j) * a.get(i, j);
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&a)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let eigvals: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    (eigvals, v)
}

fn frobenius(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let mut rng = SeededRng::new(seed);
        let mut b = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                b.set(r, c, rng.standard_normal());
            }
        }
        // B Bᵀ + n·I is comfortably SPD.
        let mut m = b.matmul(&b.transpose());
        for i in 0..n {
            m.set(i, i, m.get(i, i) + n as f64);
        }
        m
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Matrix::identity(3)).unwrap();
        assert_eq!(l, Matrix::identity(3));
    }

    #[test]
    fn cholesky_diagonal_square_roots() {
        let l = cholesky(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert_eq!(l, Matrix::diag(&[2.0, 3.0]));
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let m = random_spd(6, 7);
        let l = cholesky(&m).unwrap();
        let reconstructed = l.matmul(&l.transpose());
        assert!(reconstructed.max_abs_diff(&m) < 1e-8);
        // Upper triangle of L is zero.
        for r in 0..6 {
            for c in (r + 1)..6 {
                assert_eq!(l.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let m = Matrix::new(2, 2, vec![1.0, 0.5, 0.2, 1.0]).unwrap();
        assert!(matches!(
            cholesky(&m),
            Err(NumericsError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = Matrix::diag(&[1.0, -2.0]);
        assert!(matches!(
            cholesky(&m),
            Err(NumericsError::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn cholesky_psd_handles_zero_matrix() {
        let l = cholesky_psd(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(l, Matrix::zeros(3, 3));
        assert!(matches!(
            cholesky(&Matrix::zeros(3, 3)),
            Err(NumericsError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn mvn_zero_covariance_returns_mean() {
        let mean = [285_000.0, 34.0, 76.0, 745.0, 122_000.0, 49.0];
        let cov = Matrix::zeros(6, 6);
        let mut rng = SeededRng::new(11);
        let samples = mvn_sample(&mean, &cov, 8, &mut rng).unwrap();
        for r in 0..8 {
            assert_eq!(samples.row(r), &mean);
        }
    }

    #[test]
    fn mvn_table_moments_within_three_standard_errors() {
        // Credit score column of the loan-application moments.
        let mean = [285_000.0, 34.0, 76.0, 745.0, 122_000.0, 49.0];
        let sds = [197_000.0, 9.7, 15.0, 58.8, 84_300.0, 13.8];
        let cov = Matrix::diag(&sds.iter().map(|s| s * s).collect::<Vec<_>>());
        let n = 10_000;
        let mut rng = SeededRng::new(42);
        let samples = mvn_sample(&mean, &cov, n, &mut rng).unwrap();
        let credit_mean: f64 = (0..n).map(|r| samples.get(r, 3)).sum::<f64>() / n as f64;
        let three_se = 3.0 * 58.8 / (n as f64).sqrt();
        assert!(
            (credit_mean - 745.0).abs() < three_se,
            "credit mean {credit_mean} outside 745 +/- {three_se}"
        );
    }

    #[test]
    fn mvn_same_seed_bit_identical() {
        let mean = [1.0, -2.0];
        let cov = Matrix::new(2, 2, vec![2.0, 0.3, 0.3, 1.0]).unwrap();
        let a = mvn_sample(&mean, &cov, 50, &mut SeededRng::new(5)).unwrap();
        let b = mvn_sample(&mean, &cov, 50, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mvn_empirical_covariance_shrinks_with_n() {
        let mean = [0.0, 0.0, 0.0];
        let cov = Matrix::new(3, 3, vec![2.0, 0.5, 0.1, 0.5, 1.0, -0.2, 0.1, -0.2, 1.5]).unwrap();
        let frob_err = |n: usize, seed: u64| -> f64 {
            let samples = mvn_sample(&mean, &cov, n, &mut SeededRng::new(seed)).unwrap();
            let mut emp = Matrix::zeros(3, 3);
            let mut mu = [0.0; 3];
            for r in 0..n {
                for (i, m) in mu.iter_mut().enumerate() {
                    *m += samples.get(r, i);
                }
            }
            for m in &mut mu {
                *m /= n as f64;
            }
            for r in 0..n {
                for i in 0..3 {
                    for j in 0..3 {
                        let v = emp.get(i, j)
                            + (samples.get(r, i) - mu[i]) * (samples.get(r, j) - mu[j]);
                        emp.set(i, j, v);
                    }
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    let v = emp.get(i, j) / (n as f64 - 1.0);
                    emp.set(i, j, v);
                }
            }
            let mut err = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    err += (emp.get(i, j) - cov.get(i, j)).powi(2);
                }
            }
            err.sqrt()
        };
        // Average over a few seeds so the O(1/sqrt(n)) trend is stable.
        let small: f64 = (0..4).map(|s| frob_err(200, s)).sum::<f64>() / 4.0;
        let large: f64 = (0..4).map(|s| frob_err(20_000, s)).sum::<f64>() / 4.0;
        assert!(
            large < small / 4.0,
            "covariance error did not shrink: {small} -> {large}"
        );
    }

    #[test]
    fn pca_rank_one_recovers_axis() {
        let rows: Vec<Vec<f64>> = vec![
            vec![2.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![3.5, 0.0, 0.0],
        ];
        let pc = first_principal_component(&Matrix::from_rows(&rows).unwrap()).unwrap();
        // Mean projection (mean 1.5 along e1) must be positive => +e1.
        assert!((pc[0] - 1.0).abs() < 1e-12);
        assert!(pc[1].abs() < 1e-12 && pc[2].abs() < 1e-12);
    }

    #[test]
    fn pca_antipodal_ties_toward_first_row() {
        let u = normalized(&[1.0, 2.0, -1.0]);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        let pc = first_principal_component(&Matrix::from_rows(&[u.clone(), neg]).unwrap()).unwrap();
        let c = cosine(&pc, &u);
        assert!(c > 1.0 - 1e-10, "tie should orient toward first row: {c}");
    }

    #[test]
    fn pca_degenerate_rows_rejected() {
        let rows = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]];
        assert_eq!(
            first_principal_component(&Matrix::from_rows(&rows).unwrap()),
            Err(NumericsError::DegenerateData)
        );
    }

    #[test]
    fn pca_matches_dense_eigendecomposition_oracle() {
        // Independent oracle: nalgebra's symmetric eigendecomposition of the
        // same centered covariance.
        let mut rng = SeededRng::new(3);
        let n = 50;
        let d = 16;
        let mut data = Matrix::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                // Stretch a couple of directions so the spectrum is well separated.
                let scale = if c == 2 { 4.0 } else if c == 7 { 2.0 } else { 1.0 };
                data.set(r, c, scale * rng.standard_normal());
            }
        }
        let pc = first_principal_component(&data).unwrap();

        let mut mean = vec![0.0; d];
        for r in 0..n {
            axpy(1.0, data.row(r), &mut mean);
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        for r in 0..n {
            let centered: Vec<f64> = data.row(r).iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += centered[i] * centered[j] / (n as f64 - 1.0);
                }
            }
        }
        let eig = nalgebra::SymmetricEigen::new(cov);
        let top = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let oracle: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
        let c = cosine(&pc, &oracle).abs();
        assert!(c >= 1.0 - 1e-6, "|cos| = {c}");
    }

    #[test]
    fn pca_unit_norm() {
        let mut rng = SeededRng::new(9);
        for _ in 0..5 {
            let rows: Vec<Vec<f64>> = (0..10).map(|_| rng.normal_vec(8)).collect();
            let pc = first_principal_component(&Matrix::from_rows(&rows).unwrap()).unwrap();
            assert!((norm(&pc) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rng_split_streams_independent() {
        let base = SeededRng::new(123);
        let mut a = base.split(0);
        let mut b = base.split(1);
        let va: Vec<f64> = (0..8).map(|_| a.uniform()).collect();
        let vb: Vec<f64> = (0..8).map(|_| b.uniform()).collect();
        assert_ne!(va, vb);
        let mut a2 = base.split(0);
        let va2: Vec<f64> = (0..8).map(|_| a2.uniform()).collect();
        assert_eq!(va, va2);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let m = Matrix::new(2, 3, vec![1.0, -2.5, 3.125, 1e-17, 745.0, 0.1]).unwrap();
        let parsed = Matrix::from_csv(&m.to_csv()).unwrap();
        assert!(m.max_abs_diff(&parsed) < 1e-24);
    }
}
