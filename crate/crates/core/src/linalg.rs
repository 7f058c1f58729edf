//! Dense real matrices, the SVD wrapper, and ball/sphere measures.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Relative cutoff `tol * sigma_1` below which a singular value counts as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Dense `rows x cols` matrix stored row-major. Entries are always finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Domain(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: format!("{} entries", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite entry {} at index {pos}",
                data[pos]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from row slices; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Domain("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    /// Square diagonal matrix.
    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut out = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            out.data[i * n + i] = d;
        }
        out
    }

    /// `rows x cols` matrix with `diag` on the leading diagonal.
    pub fn rect_diag(rows: usize, cols: usize, diag: &[f64]) -> Self {
        let mut out = Self::zeros(rows, cols);
        for (i, &d) in diag.iter().enumerate().take(rows.min(cols)) {
            out.data[i * cols + i] = d;
        }
        out
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data).expect("from_fn produced an invalid matrix")
    }

    /// `a b^T`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
    }

    /// Inverse of [`Matrix::vec`].
    pub fn from_vec_col_major(rows: usize, cols: usize, v: &[f64]) -> Result<Self> {
        if v.len() != rows * cols {
            return Err(Error::Dimension {
                expected: format!("{} entries", rows * cols),
                got: format!("{} entries", v.len()),
            });
        }
        let mut data = vec![0.0; rows * cols];
        for j in 0..cols {
            for i in 0..rows {
                data[i * cols + j] = v[j * rows + i];
            }
        }
        Matrix::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Column-stacked vectorization.
    pub fn vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                expected: format!("{} rows", self.cols),
                got: format!("{} rows", other.rows),
            });
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.get(i, p);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(p);
                for (o, &b) in out[i * other.cols..(i + 1) * other.cols].iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(self.rows, other.cols, out)
    }

    /// `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `u^T self v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let inner: f64 = self.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
                u[i] * inner
            })
            .sum()
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|v| v * alpha).collect())
            .expect("scaling produced a non-finite entry")
    }

    /// Frobenius norm, i.e. the Euclidean norm of `vec(self)`.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Matrix) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Result<Matrix> {
        Matrix::new(m.nrows(), m.ncols(), m.transpose().as_slice().to_vec())
    }
}

/// `tr(a^T b)`.
pub fn trace_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Thin SVD `x = U diag(sigma) V^T` with `p = min(m, n)` factors.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Nonincreasing, nonnegative.
    pub singular_values: Vec<f64>,
    /// `m x p`, orthonormal columns.
    pub left_factors: Matrix,
    /// `n x p`, orthonormal columns.
    pub right_factors: Matrix,
    pub numerical_rank: usize,
}

impl SvdResult {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    /// `U diag(sigma) V^T` truncated to the leading `rank` triplets.
    pub fn reconstruct(&self, rank: usize) -> Matrix {
        let (m, n) = (self.left_factors.rows(), self.right_factors.rows());
        let rank = rank.min(self.singular_values.len());
        Matrix::from_fn(m, n, |i, j| {
            (0..rank)
                .map(|t| {
                    self.left_factors.get(i, t) * self.singular_values[t] * self.right_factors.get(j, t)
                })
                .sum()
        })
    }
}

const SVD_MAX_ITERS: usize = 10_000;

/// Singular value decomposition with sorted values and a fixed sign convention:
/// the first component of each left factor whose magnitude exceeds `1e-12`
/// is nonnegative (the paired right factor flips with it).
pub fn svd(x: &Matrix, rank_tol: f64) -> Result<SvdResult> {
    if !(rank_tol > 0.0 && rank_tol < 1.0) {
        return Err(Error::Domain(format!("rank_tol must lie in (0, 1), got {rank_tol}")));
    }
    let (m, n) = x.shape();
    let p = m.min(n);
    let decomposition = x
        .to_dmatrix()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or_else(|| {
            Error::Numeric(format!(
                "SVD of a {m}x{n} matrix did not converge within {SVD_MAX_ITERS} iterations"
            ))
        })?;
    let u = decomposition.u.expect("left factors requested");
    let v_t = decomposition.v_t.expect("right factors requested");
    let sigma = decomposition.singular_values;

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let mut singular_values = Vec::with_capacity(p);
    let mut left = vec![0.0; m * p];
    let mut right = vec![0.0; n * p];
    for (t, &src) in order.iter().enumerate() {
        singular_values.push(sigma[src].max(0.0));
        let sign = u
            .column(src)
            .iter()
            .find(|c| c.abs() > 1e-12)
            .map_or(1.0, |c| if *c < 0.0 { -1.0 } else { 1.0 });
        for i in 0..m {
            left[i * p + t] = sign * u[(i, src)];
        }
        for j in 0..n {
            right[j * p + t] = sign * v_t[(src, j)];
        }
    }

    let cutoff = rank_tol * singular_values.first().copied().unwrap_or(0.0);
    let numerical_rank = singular_values.iter().filter(|&&s| s > cutoff).count();
    Ok(SvdResult {
        singular_values,
        left_factors: Matrix::new(m, p, left)?,
        right_factors: Matrix::new(n, p, right)?,
        numerical_rank,
    })
}

pub fn numerical_rank(x: &Matrix) -> Result<usize> {
    Ok(svd(x, DEFAULT_RANK_TOL)?.numerical_rank)
}

/// Product of the nonzero singular values, accumulated in the log domain.
pub fn delta_product(x: &Matrix) -> Result<f64> {
    let dec = svd(x, DEFAULT_RANK_TOL)?;
    delta_from_singular_values(&dec.singular_values[..dec.numerical_rank])
}

pub(crate) fn delta_from_singular_values(sigma: &[f64]) -> Result<f64> {
    if sigma.is_empty() {
        return Err(Error::Domain("product of singular values is undefined for the zero matrix".into()));
    }
    Ok(sigma.iter().map(|s| s.ln()).sum::<f64>().exp())
}

/// `ln V(k, s)`.
pub fn ln_ball_volume(k: usize, s: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let half = k as f64 / 2.0;
    half * PI.ln() + k as f64 * s.ln() - ln_gamma(half + 1.0)
}

/// Volume of the open Euclidean `k`-ball of radius `s`, with `V(0, s) = 1`.
pub fn ball_volume(k: usize, s: f64) -> f64 {
    ln_ball_volume(k, s).exp()
}

/// `ln A(k-1, s)`.
pub fn ln_sphere_area(k_minus_1: usize, s: f64) -> f64 {
    let k = k_minus_1 as f64 + 1.0;
    std::f64::consts::LN_2 + (k / 2.0) * PI.ln() + k_minus_1 as f64 * s.ln() - ln_gamma(k / 2.0)
}

/// Surface area of the boundary of the `k`-ball of radius `s`, where
/// `k = k_minus_1 + 1`.
pub fn sphere_area(k_minus_1: usize, s: f64) -> f64 {
    ln_sphere_area(k_minus_1, s).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::rng::rng_from_seed;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn trace_inner_examples() {
        let i2 = Matrix::identity(2);
        assert_eq!(trace_inner(&i2, &i2).unwrap(), 2.0);
        let x = gaussian(3, 4, 1);
        assert_eq!(trace_inner(&x, &Matrix::zeros(3, 4)).unwrap(), 0.0);
        assert!(trace_inner(&x, &Matrix::zeros(4, 3)).is_err());

        let (a, b) = (gaussian(3, 4, 2), gaussian(3, 4, 3));
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                expected += a.get(i, j) * b.get(i, j);
            }
        }
        assert_relative_eq!(trace_inner(&a, &b).unwrap(), expected, max_relative = 1e-14);
        assert_relative_eq!(trace_inner(&a, &a).unwrap().sqrt(), a.norm(), max_relative = 1e-14);
    }

    #[test]
    fn svd_examples() {
        let d = svd(&Matrix::from_diag(&[3.0, 2.0]), DEFAULT_RANK_TOL).unwrap();
        assert_relative_eq!(d.singular_values[0], 3.0, max_relative = 1e-14);
        assert_relative_eq!(d.singular_values[1], 2.0, max_relative = 1e-14);
        assert_eq!(d.numerical_rank, 2);

        let z = svd(&Matrix::zeros(2, 3), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(z.singular_values, vec![0.0, 0.0]);
        assert_eq!(z.numerical_rank, 0);

        let x = gaussian(4, 2, 5).matmul(&gaussian(3, 2, 6).transpose()).unwrap();
        assert_eq!(svd(&x, DEFAULT_RANK_TOL).unwrap().numerical_rank, 2);
    }

    #[test]
    fn svd_rejects_bad_tolerance() {
        assert!(svd(&Matrix::identity(2), 0.0).is_err());
        assert!(svd(&Matrix::identity(2), 1.0).is_err());
    }

    #[test]
    fn svd_sign_convention_is_stable() {
        let x = gaussian(5, 3, 9);
        let a = svd(&x, DEFAULT_RANK_TOL).unwrap();
        let b = svd(&x.scale(1.0), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(a.left_factors, b.left_factors);
        for t in 0..3 {
            let first = (0..5).map(|i| a.left_factors.get(i, t)).find(|c| c.abs() > 1e-12).unwrap();
            assert!(first >= 0.0);
        }
    }

    #[test]
    fn delta_product_examples() {
        assert_relative_eq!(delta_product(&Matrix::from_diag(&[3.0, 2.0])).unwrap(), 6.0, max_relative = 1e-12);
        let e11 = Matrix::outer(&[1.0, 0.0], &[1.0, 0.0]);
        assert_relative_eq!(delta_product(&e11).unwrap(), 1.0, max_relative = 1e-12);
        assert!(delta_product(&Matrix::zeros(2, 2)).is_err());

        // Orthonormal factors from a QR of a Gaussian matrix; sigma = (2, 1, 0.5).
        let q = |seed| {
            let qr = gaussian(5, 3, seed).to_dmatrix().qr();
            Matrix::from_dmatrix(&qr.q()).unwrap()
        };
        let (u, v) = (q(11), q(12));
        let x = u.matmul(&Matrix::from_diag(&[2.0, 1.0, 0.5])).unwrap().matmul(&v.transpose()).unwrap();
        assert_eq!(numerical_rank(&x).unwrap(), 3);
        assert_relative_eq!(delta_product(&x).unwrap(), 1.0, max_relative = 1e-10);
    }

    #[test]
    fn delta_product_survives_tiny_singular_values() {
        let diag: Vec<f64> = (0..40).map(|_| 1e-9).collect();
        // 1e-360 underflows a naive product; the cutoff is relative so all 40 count.
        let d = svd(&Matrix::from_diag(&diag), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(d.numerical_rank, 40);
        let ln: f64 = d.singular_values.iter().map(|s| s.ln()).sum();
        assert_relative_eq!(ln, 40.0 * 1e-9f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn ball_and_sphere_examples() {
        assert_eq!(ball_volume(0, 5.0), 1.0);
        assert_relative_eq!(ball_volume(2, 1.0), PI, max_relative = 1e-13);
        assert_relative_eq!(ball_volume(3, 2.0), 32.0 * PI / 3.0, max_relative = 1e-13);
        assert_relative_eq!(sphere_area(1, 1.0), 2.0 * PI, max_relative = 1e-13);
        assert_relative_eq!(sphere_area(2, 1.0), 4.0 * PI, max_relative = 1e-13);
        assert_relative_eq!(sphere_area(1, 3.0), 6.0 * PI, max_relative = 1e-13);
    }

    #[test]
    fn ball_volume_scaling_and_shell_identity() {
        for k in 1..30 {
            for &s in &[0.3, 1.0, 2.5] {
                let v = ball_volume(k, s);
                assert_relative_eq!(v, ball_volume(k, 1.0) * s.powi(k as i32), max_relative = 1e-12);
                assert_relative_eq!(sphere_area(k - 1, s) * s / k as f64, v, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn vec_round_trip() {
        let x = gaussian(3, 5, 4);
        let v = x.vec();
        assert_eq!(v[1], x.get(1, 0));
        assert_eq!(Matrix::from_vec_col_major(3, 5, &v).unwrap(), x);
    }

    proptest! {
        #[test]
        fn trace_inner_matches_vec_dot(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let a = gaussian(rows, cols, seed);
            let b = gaussian(rows, cols, seed ^ 1);
            let dot: f64 = a.vec().iter().zip(b.vec()).map(|(x, y)| x * y).sum();
            prop_assert!((trace_inner(&a, &b).unwrap() - dot).abs() <= 1e-12 * (1.0 + dot.abs()));
            prop_assert_eq!(trace_inner(&a, &b).unwrap(), trace_inner(&b, &a).unwrap());
        }

        #[test]
        fn delta_of_diagonal(d in proptest::collection::vec(0.1f64..10.0, 1..6), flips in any::<u8>()) {
            let signed: Vec<f64> = d.iter().enumerate()
                .map(|(i, v)| if flips >> i & 1 == 1 { -v } else { *v }).collect();
            let expected: f64 = d.iter().product();
            let got = delta_product(&Matrix::from_diag(&signed)).unwrap();
            prop_assert!((got - expected).abs() <= 1e-12 * expected);
        }
    }

    #[test]
    fn svd_residuals_on_random_matrices() {
        let mut rng = rng_from_seed(2024);
        for trial in 0..1000u64 {
            let m = rng.random_range(1..=12);
            let n = rng.random_range(1..=12);
            let x = gaussian(m, n, trial);
            let d = svd(&x, DEFAULT_RANK_TOL).unwrap();
            let scale = x.norm().max(1.0);
            assert!(d.singular_values.windows(2).all(|w| w[0] >= w[1]));
            assert!(d.singular_values.iter().all(|&s| s >= 0.0));
            let rec = d.reconstruct(m.min(n)).distance(&x).unwrap();
            assert!(rec <= 1e-10 * scale, "reconstruction residual {rec} for {m}x{n}");
            for f in [&d.left_factors, &d.right_factors] {
                let gram = f.transpose().matmul(f).unwrap();
                let off = gram.distance(&Matrix::identity(m.min(n))).unwrap();
                assert!(off <= 1e-10 * scale, "orthonormality residual {off}");
            }
        }
    }
}
