//! Support-set generators and box-counting dimension estimates.
//!
//! Covering numbers are replaced by the number of occupied cells of an
//! axis-aligned grid anchored at the origin. For a radius `rho` the cell side
//! is the largest power of two not exceeding `2 rho / sqrt(mn)`, so every cell
//! fits inside a ball of radius `rho` and the grids for different radii are
//! nested. Nesting makes the count exactly monotone in `rho`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::rng_from_seed;

/// Default reported truncation probability for generated supports.
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Resampling attempts before a sparse factor is shrunk into its bound.
const FACTOR_REJECTION_CAP: usize = 10_000;

/// Dimension `(m + n - r) r` of the manifold of rank-`r` `m x n` matrices.
pub fn manifold_dim(m: usize, n: usize, r: usize) -> Result<usize> {
    if r > m.min(n) {
        return Err(Error::Domain(format!("rank {r} exceeds min({m}, {n})")));
    }
    Ok((m + n - r) * r)
}

/// Checks `r <= l1 < m/2` and `r <= l2 <= n/2 - 1/r` in integer arithmetic.
pub fn check_sparse_factor_params(m: usize, n: usize, r: usize, l1: usize, l2: usize) -> Result<()> {
    let ok = r >= 1 && r <= l1 && 2 * l1 < m && r <= l2 && 2 * l2 * r + 2 <= n * r;
    if ok {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "sparse-factor parameters need r <= l1 < m/2 and r <= l2 <= n/2 - 1/r; got m={m} n={n} r={r} l1={l1} l2={l2}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SupportSet {
    /// Matrices of rank at most `r` with Frobenius norm at most `bound`.
    LowRank { m: usize, n: usize, r: usize, bound: f64 },
    /// `X1^T X2` with `X1` (`r x m`) and `X2` (`r x n`) having `l1` and `l2`
    /// nonzero columns and norms below `bound`.
    SparseFactor {
        m: usize,
        n: usize,
        r: usize,
        l1: usize,
        l2: usize,
        bound: f64,
    },
    /// One factor set: `rows x cols` matrices with exactly `l` nonzero
    /// columns and norm below `bound`.
    ColumnSparse { rows: usize, cols: usize, l: usize, bound: f64 },
    /// A finite set of matrices, sampled uniformly with replacement.
    PointCloud { points: Vec<Matrix> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSpec {
    pub set: SupportSet,
    pub epsilon: f64,
}

impl SupportSpec {
    pub fn low_rank(m: usize, n: usize, r: usize, bound: f64) -> Result<Self> {
        Self::new(SupportSet::LowRank { m, n, r, bound })
    }

    pub fn sparse_factor(m: usize, n: usize, r: usize, l1: usize, l2: usize, bound: f64) -> Result<Self> {
        Self::new(SupportSet::SparseFactor { m, n, r, l1, l2, bound })
    }

    pub fn column_sparse(rows: usize, cols: usize, l: usize, bound: f64) -> Result<Self> {
        Self::new(SupportSet::ColumnSparse { rows, cols, l, bound })
    }

    pub fn point_cloud(points: Vec<Matrix>) -> Result<Self> {
        Self::new(SupportSet::PointCloud { points })
    }

    pub fn new(set: SupportSet) -> Result<Self> {
        let spec = SupportSpec {
            set,
            epsilon: DEFAULT_EPSILON,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Domain(format!("epsilon must lie in [0, 1), got {}", self.epsilon)));
        }
        match &self.set {
            SupportSet::LowRank { m, n, r, bound } => {
                if *r < 1 || r > &(*m).min(*n) {
                    return Err(Error::Domain(format!("rank {r} must lie in 1..=min({m}, {n})")));
                }
                positive_bound(*bound)
            }
            SupportSet::SparseFactor { m, n, r, l1, l2, bound } => {
                check_sparse_factor_params(*m, *n, *r, *l1, *l2)?;
                positive_bound(*bound)
            }
            SupportSet::ColumnSparse { rows, cols, l, bound } => {
                if *rows < 1 || *l < 1 || l > cols {
                    return Err(Error::Domain(format!("need 1 <= l <= cols and rows >= 1, got rows={rows} cols={cols} l={l}")));
                }
                positive_bound(*bound)
            }
            SupportSet::PointCloud { points } => {
                let first = points
                    .first()
                    .ok_or_else(|| Error::Domain("point cloud must be nonempty".into()))?;
                if let Some(bad) = points.iter().find(|p| p.shape() != first.shape()) {
                    return Err(Error::shape(first.shape(), bad.shape()));
                }
                Ok(())
            }
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match &self.set {
            SupportSet::LowRank { m, n, .. } | SupportSet::SparseFactor { m, n, .. } => (*m, *n),
            SupportSet::ColumnSparse { rows, cols, .. } => (*rows, *cols),
            SupportSet::PointCloud { points } => points[0].shape(),
        }
    }

    /// Upper bound on the Minkowski dimension of the generated set, where one is known.
    pub fn reference_dim(&self) -> usize {
        match &self.set {
            SupportSet::LowRank { m, n, r, .. } => (m + n - r) * r,
            SupportSet::SparseFactor { r, l1, l2, .. } => (l1 + l2) * r,
            SupportSet::ColumnSparse { rows, l, .. } => rows * l,
            SupportSet::PointCloud { .. } => 0,
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Matrix {
        match &self.set {
            SupportSet::LowRank { m, n, r, bound } => sample_low_rank(*m, *n, *r, *bound, rng),
            SupportSet::SparseFactor { m, n, r, l1, l2, bound } => {
                let x1 = sample_sparse_factor(*r, *m, *l1, *bound, rng);
                let x2 = sample_sparse_factor(*r, *n, *l2, *bound, rng);
                x1.transpose().matmul(&x2).expect("factor shapes agree")
            }
            SupportSet::ColumnSparse { rows, cols, l, bound } => sample_sparse_factor(*rows, *cols, *l, *bound, rng),
            SupportSet::PointCloud { points } => points[rng.random_range(0..points.len())].clone(),
        }
    }
}

fn positive_bound(bound: f64) -> Result<()> {
    if bound > 0.0 && bound.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("bound must be positive, got {bound}")))
    }
}

/// `count` independent draws from `spec`.
pub fn sample_support(spec: &SupportSpec, count: usize, seed: u64) -> Result<Vec<Matrix>> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    Ok((0..count).map(|_| spec.sample_one(&mut rng)).collect())
}

/// `U V^T` with Gaussian `m x r` and `n x r` factors, rescaled to norm
/// `bound * W^(1/d)` with `W` uniform and `d = (m + n - r) r`. The rank-`r`
/// set is a cone, so this radial law spreads mass evenly over the bounded
/// part of it.
pub fn sample_low_rank<R: Rng + ?Sized>(m: usize, n: usize, r: usize, bound: f64, rng: &mut R) -> Matrix {
    let d = ((m + n - r) * r) as f64;
    loop {
        let u = Matrix::from_fn(m, r, |_, _| rng.sample(StandardNormal));
        let v = Matrix::from_fn(n, r, |_, _| rng.sample(StandardNormal));
        let x = u.matmul(&v.transpose()).expect("factor shapes agree");
        let norm = x.norm();
        if norm > 0.0 {
            let radius = bound * rng.random::<f64>().powf(1.0 / d);
            return x.scale(radius / norm);
        }
    }
}

/// `rows x cols` matrix with exactly `nonzero_cols` nonzero columns at
/// uniformly drawn positions, i.i.d. Gaussian entries, and norm below `bound`
/// (draws outside the ball are resampled).
pub fn sample_sparse_factor<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    nonzero_cols: usize,
    bound: f64,
    rng: &mut R,
) -> Matrix {
    assert!(nonzero_cols <= cols);
    let positions = sample_indices(rng, cols, nonzero_cols).into_vec();
    let mut data = vec![0.0; rows * cols];
    for attempt in 0.. {
        let mut norm_sq = 0.0;
        for &j in &positions {
            for i in 0..rows {
                let g: f64 = rng.sample(StandardNormal);
                data[i * cols + j] = g;
                norm_sq += g * g;
            }
        }
        let norm = norm_sq.sqrt();
        if norm < bound && norm > 0.0 {
            break;
        }
        if attempt >= FACTOR_REJECTION_CAP && norm > 0.0 {
            let shrink = 0.5 * bound / norm;
            data.iter_mut().for_each(|v| *v *= shrink);
            break;
        }
    }
    Matrix::new(rows, cols, data).expect("finite Gaussian entries")
}

/// `(X1, X2)` factors for the sparse-factor model; the matrix is `X1^T X2`.
pub fn sample_sparse_factor_pair<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    r: usize,
    l1: usize,
    l2: usize,
    bound: f64,
    rng: &mut R,
) -> (Matrix, Matrix) {
    (
        sample_sparse_factor(r, m, l1, bound, rng),
        sample_sparse_factor(r, n, l2, bound, rng),
    )
}

/// Grid cell side used for radius `rho` in `dim` ambient dimensions.
pub fn cell_side(rho: f64, dim: usize) -> f64 {
    let raw = 2.0 * rho / (dim as f64).sqrt();
    2f64.powi(raw.log2().floor() as i32)
}

/// Number of occupied grid cells at radius `rho`; an upper-bound surrogate for
/// the covering number.
pub fn covering_count(points: &[Matrix], rho: f64) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| Error::Domain("covering count needs at least one point".into()))?;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Domain(format!("rho must be positive, got {rho}")));
    }
    if let Some(bad) = points.iter().find(|p| p.shape() != first.shape()) {
        return Err(Error::shape(first.shape(), bad.shape()));
    }
    let side = cell_side(rho, first.as_slice().len());
    let cells = points
        .par_chunks(4096)
        .map(|chunk| {
            chunk
                .iter()
                .map(|p| p.as_slice().iter().map(|v| (v / side).floor() as i64).collect::<Vec<_>>())
                .collect::<HashSet<_>>()
        })
        .reduce(HashSet::new, |mut a, b| {
            a.extend(b);
            a
        });
    Ok(cells.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionEstimate {
    /// Decreasing radii.
    pub rho_schedule: Vec<f64>,
    /// Occupied-cell counts, one per radius.
    pub counts: Vec<usize>,
    /// Least-squares slope of `ln N` against `ln(1/rho)`.
    pub slope: f64,
    /// Coefficient of determination of the fit; 0 when the fit is degenerate.
    pub r2: f64,
    /// Slopes between consecutive levels.
    pub local_slopes: Vec<f64>,
    /// All counts equal; slope reported as 0.
    pub degenerate: bool,
}

impl DimensionEstimate {
    /// Whether the finest level was sampled densely enough: at least ten
    /// points per occupied cell.
    pub fn saturated(&self, samples: usize) -> bool {
        self.counts.last().is_some_and(|&c| samples >= 10 * c)
    }

    /// `rho,count` rows followed by a summary comment.
    pub fn write_csv<W: Write>(&self, mut w: W, reference: f64) -> std::io::Result<()> {
        writeln!(w, "rho,count")?;
        for (rho, count) in self.rho_schedule.iter().zip(&self.counts) {
            writeln!(w, "{rho},{count}")?;
        }
        writeln!(w, "# slope={} reference={} r2={}", self.slope, reference, self.r2)
    }
}

/// Geometric schedule of `levels` radii from `rho_max` down to `rho_min`.
pub fn rho_schedule(rho_min: f64, rho_max: f64, levels: usize) -> Vec<f64> {
    let ratio = rho_min / rho_max;
    (0..levels)
        .map(|j| rho_max * ratio.powf(j as f64 / (levels - 1) as f64))
        .collect()
}

/// Box-counting slope over a geometric schedule of radii.
pub fn estimate_dim(points: &[Matrix], rho_min: f64, rho_max: f64, levels: usize) -> Result<DimensionEstimate> {
    if !(rho_min > 0.0 && rho_min < rho_max && rho_max.is_finite()) {
        return Err(Error::Domain(format!("need 0 < rho_min < rho_max, got {rho_min} and {rho_max}")));
    }
    if levels < 4 {
        return Err(Error::Domain(format!("need at least 4 levels, got {levels}")));
    }
    let rho_schedule = rho_schedule(rho_min, rho_max, levels);
    let counts = rho_schedule
        .iter()
        .map(|&rho| covering_count(points, rho))
        .collect::<Result<Vec<_>>>()?;

    let xs: Vec<f64> = rho_schedule.iter().map(|r| (1.0 / r).ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
    let local_slopes = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
        .collect();

    let degenerate = counts.iter().all(|&c| c == counts[0]);
    let (slope, r2) = if degenerate { (0.0, 0.0) } else { least_squares_slope(&xs, &ys) };
    Ok(DimensionEstimate {
        rho_schedule,
        counts,
        slope: slope.max(0.0),
        r2,
        local_slopes,
        degenerate,
    })
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 0.0 };
    (slope, r2)
}

/// Writes one matrix per row in column-stacked order, preceded by a `# m,n` line.
pub fn write_point_cloud(path: &Path, points: &[Matrix]) -> Result<()> {
    let first = points
        .first()
        .ok_or_else(|| Error::Domain("cannot export an empty point cloud".into()))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        writeln!(w, "# {},{}", first.rows(), first.cols())?;
        for p in points {
            let row: Vec<String> = p.vec().iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_point_cloud(path: &Path) -> Result<Vec<Matrix>> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (header, body) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    let bad_header = || parse_err(format!("bad header `{header}`, expected `# m,n`"));
    let dims: Vec<usize> = header
        .strip_prefix('#')
        .ok_or_else(bad_header)?
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad_header())?;
    let [m, n] = dims[..] else {
        return Err(bad_header());
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .from_reader(body.as_bytes());
    let mut points = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let values: Vec<f64> = record
            .iter()
            .map(|t| t.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(format!("row {}: non-numeric entry", line + 1)))?;
        points.push(Matrix::from_vec_col_major(m, n, &values)?);
    }
    Ok(points)
}
