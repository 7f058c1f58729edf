//! Decoders `y -> X` and the injectivity probe.
//!
//! * [`decode_enumerate`]: exact search over a finite candidate set.
//! * [`decode_altmin`]: alternating least squares over `X = U V^T` with a fixed rank.
//! * [`decode_sparse_factor`]: enumerates every column-support pair of the
//!   sparse-factor model and runs the restricted alternating solver on each.
//!
//! Successful alternating-minimization runs are algorithmic successes only; a
//! failure says nothing about whether `y` determines `X`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix, DEFAULT_RANK_TOL};
use crate::measurement::{Functionals, MeasurementEnsemble, MeasurementVector};
use crate::rng::{derive_seed, rng_from_seed};
use crate::support::{check_sparse_factor_params, SupportSpec};

/// Reconstructions closer than this are treated as the same matrix.
pub const DISTINCT_THRESHOLD: f64 = 1e-6;

/// Gaps below this count as collisions in the injectivity probe.
pub const COLLISION_THRESHOLD: f64 = 1e-9;

/// Default cap on the number of support pairs the sparse-factor decoder visits.
pub const DEFAULT_SUPPORT_BUDGET: u128 = 1_000_000;

/// Ridge added to singular normal equations, relative to their mean diagonal.
const RIDGE: f64 = 1e-12;

/// Cholesky pivots with `min^2 / max^2` below this are treated as singular.
const PIVOT_RATIO: f64 = 1e-12;

const PROBE_RETRY_CAP: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub enum DecodeOutcome {
    Recovered { x_hat: Matrix },
    Ambiguous,
    NoCandidate,
    NotConverged { x_best: Matrix, residual: f64 },
}

impl DecodeOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            DecodeOutcome::Recovered { .. } => "recovered",
            DecodeOutcome::Ambiguous => "ambiguous",
            DecodeOutcome::NoCandidate => "no_candidate",
            DecodeOutcome::NotConverged { .. } => "not_converged",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Alternating-minimization restarts actually run.
    pub restarts: usize,
    /// Least-squares substeps that needed the ridge fallback.
    pub ridge_fallbacks: usize,
    /// Candidates (enumeration) or supports (sparse factor) whose reconstruction fit `y`.
    pub consistent: usize,
    /// Support pairs visited by the sparse-factor decoder.
    pub supports: usize,
    /// Support pairs rejected by the unconstrained least-squares screen.
    pub screened_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub outcome: DecodeOutcome,
    pub iterations: usize,
    /// `||apply(e, estimate) - y||`, or the smallest candidate residual when there is no estimate.
    pub residual: f64,
    pub rel_error: Option<f64>,
    pub diagnostics: Diagnostics,
}

impl DecodeResult {
    pub fn is_recovered(&self) -> bool {
        matches!(self.outcome, DecodeOutcome::Recovered { .. })
    }

    /// The recovered matrix, or the best iterate of a run that did not converge.
    pub fn estimate(&self) -> Option<&Matrix> {
        match &self.outcome {
            DecodeOutcome::Recovered { x_hat } => Some(x_hat),
            DecodeOutcome::NotConverged { x_best, .. } => Some(x_best),
            _ => None,
        }
    }

    /// Fills `rel_error = ||estimate - truth|| / ||truth||` (absolute error when `truth = 0`).
    pub fn with_truth(mut self, truth: &Matrix) -> Result<Self> {
        let scale = if truth.norm() > 0.0 { truth.norm() } else { 1.0 };
        self.rel_error = match self.estimate() {
            Some(x) => Some(x.distance(truth)? / scale),
            None => None,
        };
        Ok(self)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "outcome": self.outcome.label(),
            "residual": self.residual,
            "rel_error": self.rel_error,
            "iterations": self.iterations,
            "diagnostics": self.diagnostics,
        })
    }
}

fn check_y(e: &MeasurementEnsemble, y: &MeasurementVector) -> Result<()> {
    if y.len() != e.k() {
        return Err(Error::Dimension {
            expected: format!("{} measurements", e.k()),
            got: format!("{}", y.len()),
        });
    }
    Ok(())
}

/// Returns the unique candidate with `||apply(e, Z) - y|| <= tol`.
pub fn decode_enumerate(e: &MeasurementEnsemble, y: &MeasurementVector, candidates: &[Matrix], tol: f64) -> Result<DecodeResult> {
    check_y(e, y)?;
    if candidates.is_empty() {
        return Err(Error::Domain("candidate set must be nonempty".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let residuals = candidates
        .iter()
        .map(|z| e.apply(z)?.distance(y))
        .collect::<Result<Vec<f64>>>()?;
    let consistent: Vec<usize> = (0..candidates.len()).filter(|&i| residuals[i] <= tol).collect();
    let min_residual = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    let (outcome, residual) = match consistent[..] {
        [i] => (DecodeOutcome::Recovered { x_hat: candidates[i].clone() }, residuals[i]),
        [] => (DecodeOutcome::NoCandidate, min_residual),
        _ => (DecodeOutcome::Ambiguous, min_residual),
    };
    Ok(DecodeResult {
        outcome,
        iterations: candidates.len(),
        residual,
        rel_error: None,
        diagnostics: Diagnostics {
            consistent: consistent.len(),
            ..Diagnostics::default()
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AltMinInit {
    Random,
    Spectral,
}

impl std::str::FromStr for AltMinInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(AltMinInit::Random),
            "spectral" => Ok(AltMinInit::Spectral),
            other => Err(Error::Config(format!("unknown initialization `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltMinOptions {
    pub rank: usize,
    pub max_iters: usize,
    /// Relative residual target, also the relative-decrease stagnation threshold.
    pub tol: f64,
    pub restarts: usize,
    /// Initialization of the first restart; later restarts are always random.
    pub init: AltMinInit,
    /// Harness success threshold on the relative error against a planted truth.
    pub success_rel_err: f64,
    pub seed: u64,
}

impl AltMinOptions {
    pub fn new(rank: usize) -> Self {
        AltMinOptions {
            rank,
            max_iters: 500,
            tol: 1e-10,
            restarts: 10,
            init: AltMinInit::Spectral,
            success_rel_err: 1e-4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::Config("max_iters and restarts must be positive".into()));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!("tol must lie in (0, 1), got {}", self.tol)));
        }
        if !(self.success_rel_err > 0.0) {
            return Err(Error::Config(format!("success_rel_err must be positive, got {}", self.success_rel_err)));
        }
        Ok(())
    }
}

/// One alternating-minimization run from a fixed start.
#[derive(Clone, Debug, PartialEq)]
pub struct AltMinRun {
    pub u: Matrix,
    pub v: Matrix,
    /// Residual after each full `U`/`V` sweep.
    pub residuals: Vec<f64>,
    pub ridge_fallbacks: usize,
    pub converged: bool,
}

/// Normal-equation solver for `min ||G z - y||` with `G` given row by row.
struct LeastSquares {
    normal: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl LeastSquares {
    fn new(p: usize) -> Self {
        LeastSquares {
            normal: DMatrix::zeros(p, p),
            rhs: DVector::zeros(p),
        }
    }

    fn add_row(&mut self, g: &[f64], y: f64) {
        let p = g.len();
        for a in 0..p {
            let ga = g[a];
            if ga == 0.0 {
                continue;
            }
            self.rhs[a] += ga * y;
            for b in a..p {
                self.normal[(a, b)] += ga * g[b];
            }
        }
    }

    /// Solution and whether the ridge fallback was used.
    fn solve(mut self) -> (Vec<f64>, bool) {
        let p = self.rhs.len();
        for a in 0..p {
            for b in 0..a {
                self.normal[(a, b)] = self.normal[(b, a)];
            }
        }
        if let Some(chol) = self.normal.clone().cholesky() {
            let diag = chol.l_dirty().diagonal();
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0f64), |(lo, hi), d| (lo.min(d.abs()), hi.max(d.abs())));
            if hi > 0.0 && (lo / hi).powi(2) >= PIVOT_RATIO {
                return (chol.solve(&self.rhs).iter().copied().collect(), false);
            }
        }
        let mean_diag = (self.normal.trace() / p as f64).max(f64::MIN_POSITIVE);
        let mut lambda = RIDGE * mean_diag;
        loop {
            let mut ridged = self.normal.clone();
            for a in 0..p {
                ridged[(a, a)] += lambda;
            }
            if let Some(chol) = ridged.cholesky() {
                return (chol.solve(&self.rhs).iter().copied().collect(), true);
            }
            lambda *= 100.0;
        }
    }
}

/// `min_Z ||apply(e, Z) - y||` over all `m x n` matrices.
fn unconstrained_residual(e: &MeasurementEnsemble, y: &MeasurementVector) -> Result<f64> {
    let (m, n) = (e.m(), e.n());
    let mut ls = LeastSquares::new(m * n);
    for i in 0..e.k() {
        ls.add_row(e.dense_matrix(i).as_slice(), y.values()[i]);
    }
    let (z, _) = ls.solve();
    e.apply(&Matrix::new(m, n, z)?)?.distance(y)
}

/// Rows of the `U`-subproblem: `vec(A_i V)` in row-major order.
fn u_rows(e: &MeasurementEnsemble, v: &Matrix, out: &mut Vec<f64>) {
    let (m, r) = (e.m(), v.cols());
    out.clear();
    match e.functionals() {
        Functionals::Dense(mats) => {
            for a in mats {
                let av = a.matmul(v).expect("shapes agree");
                out.extend_from_slice(av.as_slice());
            }
        }
        Functionals::RankOne { lefts, rights } => {
            let vt = v.transpose();
            for (a, b) in lefts.iter().zip(rights) {
                let vb = vt.mul_vec(b);
                for p in 0..m {
                    out.extend((0..r).map(|q| a[p] * vb[q]));
                }
            }
        }
    }
}

/// Rows of the `V`-subproblem: `vec(A_i^T U)` in row-major order.
fn v_rows(e: &MeasurementEnsemble, u: &Matrix, out: &mut Vec<f64>) {
    let (n, r) = (e.n(), u.cols());
    out.clear();
    match e.functionals() {
        Functionals::Dense(mats) => {
            for a in mats {
                let atu = a.transpose().matmul(u).expect("shapes agree");
                out.extend_from_slice(atu.as_slice());
            }
        }
        Functionals::RankOne { lefts, rights } => {
            let ut = u.transpose();
            for (a, b) in lefts.iter().zip(rights) {
                let ua = ut.mul_vec(a);
                for j in 0..n {
                    out.extend((0..r).map(|q| b[j] * ua[q]));
                }
            }
        }
    }
}

/// Solves one substep. Returns the factor, the residual of the fit, and whether
/// the ridge was needed.
fn solve_factor(rows: &[f64], y: &[f64], dim: usize, r: usize) -> (Matrix, f64, bool) {
    let p = dim * r;
    let mut ls = LeastSquares::new(p);
    for (g, &yi) in rows.chunks_exact(p).zip(y) {
        ls.add_row(g, yi);
    }
    let (z, ridged) = ls.solve();
    let residual = rows
        .chunks_exact(p)
        .zip(y)
        .map(|(g, &yi)| {
            let fit: f64 = g.iter().zip(&z).map(|(a, b)| a * b).sum();
            (fit - yi).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let factor = Matrix::new(dim, r, z).unwrap_or_else(|_| Matrix::zeros(dim, r));
    (factor, residual, ridged)
}

/// Rescales matching columns of `u` and `v` to equal norms; `u v^T` is unchanged.
fn balance(u: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
    let r = u.cols();
    let col_norm = |x: &Matrix, q: usize| (0..x.rows()).map(|i| x.get(i, q).powi(2)).sum::<f64>().sqrt();
    let scales: Vec<f64> = (0..r)
        .map(|q| {
            let (nu, nv) = (col_norm(u, q), col_norm(v, q));
            if nu > 0.0 && nv > 0.0 {
                (nv / nu).sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (
        Matrix::from_fn(u.rows(), r, |i, q| u.get(i, q) * scales[q]),
        Matrix::from_fn(v.rows(), r, |j, q| v.get(j, q) / scales[q]),
    )
}

/// Alternating least squares from the right factor `v0` (`n x r`).
pub fn altmin_run(e: &MeasurementEnsemble, y: &MeasurementVector, v0: Matrix, opts: &AltMinOptions) -> Result<AltMinRun> {
    check_y(e, y)?;
    let r = v0.cols();
    if v0.rows() != e.n() {
        return Err(Error::shape((e.n(), r), v0.shape()));
    }
    let target = opts.tol * y.norm().max(1.0);
    let mut v = v0;
    let mut u = Matrix::zeros(e.m(), r);
    let mut rows = Vec::new();
    let mut residuals = Vec::new();
    let mut ridge_fallbacks = 0;
    let mut converged = false;
    let mut prev = f64::INFINITY;
    for _ in 0..opts.max_iters {
        u_rows(e, &v, &mut rows);
        let (new_u, _, ridged_u) = solve_factor(&rows, y.values(), e.m(), r);
        v_rows(e, &new_u, &mut rows);
        let (new_v, residual, ridged_v) = solve_factor(&rows, y.values(), e.n(), r);
        ridge_fallbacks += ridged_u as usize + ridged_v as usize;
        (u, v) = balance(&new_u, &new_v);
        residuals.push(residual);
        if residual <= target {
            converged = true;
            break;
        }
        if prev.is_finite() && prev - residual <= opts.tol * prev {
            break;
        }
        prev = residual;
    }
    Ok(AltMinRun {
        u,
        v,
        residuals,
        ridge_fallbacks,
        converged,
    })
}

fn spectral_start(e: &MeasurementEnsemble, y: &MeasurementVector, r: usize) -> Result<Matrix> {
    let mut backprojection = Matrix::zeros(e.m(), e.n());
    for (i, &yi) in y.values().iter().enumerate() {
        backprojection = backprojection.add(&e.dense_matrix(i).scale(yi))?;
    }
    let decomposition = svd(&backprojection, DEFAULT_RANK_TOL)?;
    let v = &decomposition.right_factors;
    Ok(Matrix::from_fn(e.n(), r, |j, q| v.get(j, q) * decomposition.singular_values[q].sqrt()))
}

fn random_start<R: Rng + ?Sized>(n: usize, r: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(n, r, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Best of up to `opts.restarts` alternating-minimization runs; stops at the
/// first run whose residual reaches `tol * max(1, ||y||)`.
pub fn decode_altmin(e: &MeasurementEnsemble, y: &MeasurementVector, opts: &AltMinOptions) -> Result<DecodeResult> {
    check_y(e, y)?;
    opts.validate()?;
    let (m, n, r) = (e.m(), e.n(), opts.rank);
    if r > m.min(n) {
        return Err(Error::Domain(format!("rank {r} exceeds min({m}, {n})")));
    }
    let target = opts.tol * y.norm().max(1.0);
    if r == 0 || y.norm() == 0.0 {
        let zero = Matrix::zeros(m, n);
        let residual = y.norm();
        let outcome = if residual <= target {
            DecodeOutcome::Recovered { x_hat: zero }
        } else {
            DecodeOutcome::NotConverged { x_best: zero, residual }
        };
        return Ok(DecodeResult {
            outcome,
            iterations: 0,
            residual,
            rel_error: None,
            diagnostics: Diagnostics::default(),
        });
    }

    let scale = y.norm().sqrt() / (e.k() as f64).powf(0.25);
    let mut best: Option<(Matrix, f64)> = None;
    let mut diagnostics = Diagnostics::default();
    let mut iterations = 0;
    for restart in 0..opts.restarts {
        let v0 = if restart == 0 && opts.init == AltMinInit::Spectral {
            spectral_start(e, y, r)?
        } else {
            random_start(n, r, scale, &mut rng_from_seed(derive_seed(&[opts.seed, restart as u64])))
        };
        let run = altmin_run(e, y, v0, opts)?;
        diagnostics.restarts += 1;
        diagnostics.ridge_fallbacks += run.ridge_fallbacks;
        iterations += run.residuals.len();
        let x = run.u.matmul(&run.v.transpose())?;
        let residual = e.apply(&x)?.distance(y)?;
        if best.as_ref().is_none_or(|(_, b)| residual < *b) {
            best = Some((x, residual));
        }
        if residual <= target {
            break;
        }
    }
    let (x, residual) = best.expect("at least one restart");
    let outcome = if residual <= target {
        DecodeOutcome::Recovered { x_hat: x }
    } else {
        DecodeOutcome::NotConverged { x_best: x, residual }
    };
    Ok(DecodeResult {
        outcome,
        iterations,
        residual,
        rel_error: None,
        diagnostics,
    })
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(current.clone());
        let Some(i) = (0..k).rev().find(|&i| current[i] < n - k + i) else {
            return out;
        };
        current[i] += 1;
        for j in i + 1..k {
            current[j] = current[j - 1] + 1;
        }
    }
}

/// `C(n, k)` without overflow for the sizes used here.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Number of support pairs the sparse-factor decoder visits.
pub fn support_pair_count(m: usize, n: usize, l1: usize, l2: usize) -> u128 {
    binomial(m, l1) * binomial(n, l2)
}

/// Decodes `X = X1^T X2` with `l1`- and `l2`-column-sparse factors of rank `r`
/// by trying every support pair `(S1, S2)`. Each pair is first screened by an
/// unconstrained least-squares fit on the `S1 x S2` block, which no rank-`r`
/// matrix on that block can beat; survivors run the restricted alternating solver.
pub fn decode_sparse_factor(
    e: &MeasurementEnsemble,
    y: &MeasurementVector,
    r: usize,
    l1: usize,
    l2: usize,
    opts: &AltMinOptions,
    budget: u128,
) -> Result<DecodeResult> {
    check_y(e, y)?;
    let (m, n) = (e.m(), e.n());
    check_sparse_factor_params(m, n, r, l1, l2)?;
    let needed = support_pair_count(m, n, l1, l2);
    if needed > budget {
        return Err(Error::Budget { needed, budget });
    }
    let opts = AltMinOptions { rank: r, ..opts.clone() };
    opts.validate()?;
    let target = opts.tol * y.norm().max(1.0);

    let rows = combinations(m, l1);
    let cols = combinations(n, l2);
    let pairs: Vec<(&Vec<usize>, &Vec<usize>)> = rows.iter().flat_map(|s1| cols.iter().map(move |s2| (s1, s2))).collect();

    struct Branch {
        x: Option<Matrix>,
        residual: f64,
        screened: bool,
        result: Option<DecodeResult>,
    }
    let branches = pairs
        .par_iter()
        .enumerate()
        .map(|(index, (s1, s2))| -> Result<Branch> {
            let restricted = e.restrict(s1, s2);
            let floor = unconstrained_residual(&restricted, y)?;
            if floor > target {
                return Ok(Branch {
                    x: None,
                    residual: floor,
                    screened: true,
                    result: None,
                });
            }
            let branch_opts = AltMinOptions {
                seed: derive_seed(&[opts.seed, index as u64]),
                ..opts.clone()
            };
            let result = decode_altmin(&restricted, y, &branch_opts)?;
            let lifted = result.estimate().map(|block| {
                let mut full = Matrix::zeros(m, n).as_slice().to_vec();
                for (bi, &i) in s1.iter().enumerate() {
                    for (bj, &j) in s2.iter().enumerate() {
                        full[i * n + j] = block.get(bi, bj);
                    }
                }
                Matrix::new(m, n, full).expect("finite block")
            });
            Ok(Branch {
                x: lifted,
                residual: result.residual,
                screened: false,
                result: Some(result),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut diagnostics = Diagnostics {
        supports: branches.len(),
        ..Diagnostics::default()
    };
    let mut iterations = 0;
    let mut winners: Vec<(Matrix, f64)> = Vec::new();
    for branch in &branches {
        diagnostics.screened_out += branch.screened as usize;
        if let Some(result) = &branch.result {
            iterations += result.iterations;
            diagnostics.restarts += result.diagnostics.restarts;
            diagnostics.ridge_fallbacks += result.diagnostics.ridge_fallbacks;
            if result.is_recovered() {
                diagnostics.consistent += 1;
                winners.push((branch.x.clone().expect("recovered branches have an estimate"), branch.residual));
            }
        }
    }

    // Greedy clustering in branch order; the first member represents its cluster.
    let mut representatives: Vec<(Matrix, f64)> = Vec::new();
    for (x, residual) in winners {
        if !representatives.iter().any(|(rep, _)| rep.distance(&x).expect("same shape") <= DISTINCT_THRESHOLD) {
            representatives.push((x, residual));
        }
    }
    let min_residual = branches.iter().map(|b| b.residual).fold(f64::INFINITY, f64::min);
    let (outcome, residual) = match representatives.len() {
        0 => (DecodeOutcome::NoCandidate, min_residual),
        1 => {
            let (x_hat, residual) = representatives.pop().expect("one representative");
            (DecodeOutcome::Recovered { x_hat }, residual)
        }
        _ => (DecodeOutcome::Ambiguous, min_residual),
    };
    Ok(DecodeResult {
        outcome,
        iterations,
        residual,
        rel_error: None,
        diagnostics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Smallest `||apply(e, X - X')|| / ||X - X'||` seen.
    pub min_gap: f64,
    /// Pairs with gap below [`COLLISION_THRESHOLD`].
    pub collisions: usize,
    pub pairs: usize,
}

fn gap(e: &MeasurementEnsemble, x: &Matrix, x2: &Matrix) -> Result<f64> {
    let diff = x.sub(x2)?;
    Ok(e.apply(&diff)?.norm() / diff.norm())
}

/// Samples `trials` pairs `X != X'` from `spec` and measures how close the
/// ensemble comes to identifying them.
pub fn injectivity_probe(e: &MeasurementEnsemble, spec: &SupportSpec, trials: usize, seed: u64) -> Result<ProbeResult> {
    if trials == 0 {
        return Err(Error::Domain("trials must be at least 1".into()));
    }
    spec.validate()?;
    if spec.shape() != (e.m(), e.n()) {
        return Err(Error::shape((e.m(), e.n()), spec.shape()));
    }
    let gaps = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(&[seed, t as u64]));
            let x = spec.sample_one(&mut rng);
            for _ in 0..PROBE_RETRY_CAP {
                let x2 = spec.sample_one(&mut rng);
                if x2 != x {
                    return gap(e, &x, &x2);
                }
            }
            Err(Error::Domain(format!("could not draw two distinct points in {PROBE_RETRY_CAP} attempts")))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(summarize(&gaps))
}

/// The probe over every unordered pair of distinct points.
pub fn injectivity_probe_exhaustive(e: &MeasurementEnsemble, points: &[Matrix]) -> Result<ProbeResult> {
    let pairs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|i| (i + 1..points.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| points[i] != points[j])
        .collect();
    if pairs.is_empty() {
        return Err(Error::Domain("need at least two distinct points".into()));
    }
    let gaps = pairs
        .par_iter()
        .map(|&(i, j)| gap(e, &points[i], &points[j]))
        .collect::<Result<Vec<f64>>>()?;
    Ok(summarize(&gaps))
}

fn summarize(gaps: &[f64]) -> ProbeResult {
    ProbeResult {
        min_gap: gaps.iter().copied().fold(f64::INFINITY, f64::min),
        collisions: gaps.iter().filter(|&&g| g < COLLISION_THRESHOLD).count(),
        pairs: gaps.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;
    use crate::measurement::EnsembleKind;
    use crate::support::sample_sparse_factor_pair;
    use proptest::prelude::*;
    use rand::Rng;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_from_seed(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn planted_low_rank(m: usize, n: usize, r: usize, seed: u64) -> Matrix {
        gaussian(m, r, seed).matmul(&gaussian(r, n, seed ^ 0xff)).unwrap()
    }

    #[test]
    fn enumerate_singleton_and_duplicates() {
        let e = MeasurementEnsemble::sample(EnsembleKind::Dense, 3, 3, 2, 1.0, 1).unwrap();
        let x = gaussian(3, 3, 2);
        let y = e.apply(&x).unwrap();
        let result = decode_enumerate(&e, &y, std::slice::from_ref(&x), 1e-9).unwrap();
        assert_eq!(result.outcome, DecodeOutcome::Recovered { x_hat: x.clone() });
        let result = decode_enumerate(&e, &y, &[x.clone(), x.clone()], 1e-9).unwrap();
        assert_eq!(result.outcome, DecodeOutcome::Ambiguous);
        assert_eq!(result.diagnostics.consistent, 2);
        let result = decode_enumerate(&e, &y, &[gaussian(3, 3, 3)], 1e-9).unwrap();
        assert_eq!(result.outcome, DecodeOutcome::NoCandidate);
        assert!(decode_enumerate(&e, &y, &[], 1e-9).is_err());
        assert!(decode_enumerate(&e, &y, &[Matrix::zeros(2, 3)], 1e-9).is_err());
    }

    #[test]
    fn enumerate_recovers_cloud_members_with_one_measurement() {
        let cloud: Vec<Matrix> = (0..100).map(|i| gaussian(3, 3, 100 + i)).collect();
        let mut recovered = 0;
        for t in 0..200u64 {
            let e = MeasurementEnsemble::sample(EnsembleKind::Dense, 3, 3, 1, 1.0, t).unwrap();
            let planted = &cloud[(t as usize * 37) % 100];
            let y = e.apply(planted).unwrap();
            let result = decode_enumerate(&e, &y, &cloud, 1e-9).unwrap();
            // Recomputed oracle: exactly one candidate within tolerance.
            let within = cloud.iter().filter(|z| e.apply(z).unwrap().distance(&y).unwrap() <= 1e-9).count();
            assert_eq!(result.is_recovered(), within == 1);
            if result.outcome == (DecodeOutcome::Recovered { x_hat: planted.clone() }) {
                recovered += 1;
            }
        }
        assert!(recovered >= 199, "{recovered}");
    }

    #[test]
    fn altmin_rank_zero_and_zero_measurements() {
        let e = MeasurementEnsemble::sample(EnsembleKind::Dense, 4, 4, 5, 1.0, 1).unwrap();
        let zero = MeasurementVector::new(vec![0.0; 5]).unwrap();
        let result = decode_altmin(&e, &zero, &AltMinOptions::new(0)).unwrap();
        assert_eq!(result.outcome, DecodeOutcome::Recovered { x_hat: Matrix::zeros(4, 4) });
        let y = e.apply(&gaussian(4, 4, 3)).unwrap();
        let result = decode_altmin(&e, &y, &AltMinOptions::new(0)).unwrap();
        assert!(matches!(result.outcome, DecodeOutcome::NotConverged { .. }));
        let result = decode_altmin(&e, &zero, &AltMinOptions::new(2)).unwrap();
        assert_eq!(result.outcome, DecodeOutcome::Recovered { x_hat: Matrix::zeros(4, 4) });
    }

    fn altmin_success_rate(kind: EnsembleKind, k: usize, trials: u64) -> usize {
        (0..trials)
            .filter(|&t| {
                let e = MeasurementEnsemble::sample(kind, 8, 8, k, 1.0, derive_seed(&[t, 1])).unwrap();
                let x = planted_low_rank(8, 8, 1, derive_seed(&[t, 2]));
                let y = e.apply(&x).unwrap();
                let opts = AltMinOptions {
                    seed: derive_seed(&[t, 3]),
                    ..AltMinOptions::new(1)
                };
                let result = decode_altmin(&e, &y, &opts).unwrap().with_truth(&x).unwrap();
                result.rel_error.unwrap() <= 1e-4
            })
            .count()
    }

    #[test]
    fn altmin_recovers_planted_rank_one_above_threshold() {
        assert!(altmin_success_rate(EnsembleKind::Dense, 30, 40) >= 38);
        assert!(altmin_success_rate(EnsembleKind::RankOne, 30, 40) >= 38);
    }

    #[test]
    fn altmin_fails_below_threshold() {
        assert!(altmin_success_rate(EnsembleKind::Dense, 8, 20) <= 2);
    }

    #[test]
    fn altmin_output_respects_rank_and_consistency() {
        for t in 0..10 {
            let e = MeasurementEnsemble::sample(EnsembleKind::Dense, 6, 5, 40, 1.0, t).unwrap();
            let x = planted_low_rank(6, 5, 2, t + 50);
            let y = e.apply(&x).unwrap();
            let result = decode_altmin(&e, &y, &AltMinOptions::new(2)).unwrap();
            let x_hat = result.estimate().unwrap();
            assert!(numerical_rank(x_hat).unwrap() <= 2);
            if result.is_recovered() {
                assert!(e.apply(x_hat).unwrap().distance(&y).unwrap() <= 1e-10 * y.norm().max(1.0));
            }
        }
    }

    #[test]
    fn residual_history_is_nonincreasing() {
        for t in 0..20 {
            let e = MeasurementEnsemble::sample(EnsembleKind::RankOne, 7, 6, 25, 1.0, t).unwrap();
            let y = e.apply(&planted_low_rank(7, 6, 2, t + 9)).unwrap();
            let run = altmin_run(&e, &y, gaussian(6, 2, t + 3), &AltMinOptions::new(2)).unwrap();
            for w in run.residuals.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-13, "{:?}", run.residuals);
            }
        }
    }

    #[test]
    fn normal_equations_fall_back_to_ridge() {
        let mut ls = LeastSquares::new(2);
        ls.add_row(&[1.0, 1.0], 2.0);
        let (z, ridged) = ls.solve();
        assert!(ridged);
        assert!((z[0] + z[1] - 2.0).abs() < 1e-9);
        let mut ls = LeastSquares::new(2);
        ls.add_row(&[1.0, 0.0], 1.0);
        ls.add_row(&[0.0, 2.0], 4.0);
        let (z, ridged) = ls.solve();
        assert!(!ridged);
        assert!((z[0] - 1.0).abs() < 1e-14 && (z[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn combinations_are_lexicographic() {
        assert_eq!(combinations(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
        for (n, k) in [(8, 2), (10, 3), (6, 6)] {
            assert_eq!(combinations(n, k).len() as u128, binomial(n, k));
        }
        assert_eq!(support_pair_count(8, 8, 2, 2), 784);
    }

    fn planted_sparse(t: u64) -> Matrix {
        let mut rng = rng_from_seed(t);
        let (x1, x2) = sample_sparse_factor_pair(8, 8, 1, 2, 2, 10.0, &mut rng);
        x1.transpose().matmul(&x2).unwrap()
    }

    #[test]
    fn sparse_factor_recovers_below_manifold_dim() {
        let mut ok = 0;
        for t in 0..10u64 {
            let e = MeasurementEnsemble::sample(EnsembleKind::RankOne, 8, 8, 6, 1.0, t).unwrap();
            let x = planted_sparse(t + 1000);
            let y = e.apply(&x).unwrap();
            let result = decode_sparse_factor(&e, &y, 1, 2, 2, &AltMinOptions::new(1), DEFAULT_SUPPORT_BUDGET)
                .unwrap()
                .with_truth(&x)
                .unwrap();
            assert_eq!(result.diagnostics.supports, 784);
            if result.is_recovered() && result.rel_error.unwrap() <= 1e-6 {
                ok += 1;
            }
        }
        assert!(ok >= 9, "{ok}");
    }

    #[test]
    fn sparse_factor_is_ambiguous_with_two_measurements() {
        let e = MeasurementEnsemble::sample(EnsembleKind::RankOne, 8, 8, 2, 1.0, 4).unwrap();
        let x = planted_sparse(44);
        let result = decode_sparse_factor(&e, &e.apply(&x).unwrap(), 1, 2, 2, &AltMinOptions::new(1), DEFAULT_SUPPORT_BUDGET).unwrap();
        assert_eq!(result.outcome, DecodeOutcome::Ambiguous);
    }

    #[test]
    fn sparse_factor_zero_measurements_give_zero() {
        let e = MeasurementEnsemble::sample(EnsembleKind::RankOne, 8, 8, 6, 1.0, 4).unwrap();
        let zero = MeasurementVector::new(vec![0.0; 6]).unwrap();
        let result = decode_sparse_factor(&e, &zero, 1, 2, 2, &AltMinOptions::new(1), DEFAULT_SUPPORT_BUDGET).unwrap();
        assert_eq!(result.outcome, DecodeOutcome::Recovered { x_hat: Matrix::zeros(8, 8) });
    }

    #[test]
    fn sparse_factor_refuses_over_budget() {
        let e = MeasurementEnsemble::sample(EnsembleKind::RankOne, 8, 8, 6, 1.0, 4).unwrap();
        let y = e.apply(&planted_sparse(3)).unwrap();
        let err = decode_sparse_factor(&e, &y, 1, 2, 2, &AltMinOptions::new(1), 100).unwrap_err();
        assert!(matches!(err, Error::Budget { needed: 784, budget: 100 }));
        let err = decode_sparse_factor(&e, &y, 1, 4, 2, &AltMinOptions::new(1), 100).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn decode_result_json_shape() {
        let e = MeasurementEnsemble::sample(EnsembleKind::Dense, 2, 2, 1, 1.0, 1).unwrap();
        let x = gaussian(2, 2, 5);
        let result = decode_enumerate(&e, &e.apply(&x).unwrap(), std::slice::from_ref(&x), 1e-9)
            .unwrap()
            .with_truth(&x)
            .unwrap();
        let json = result.to_json_value();
        assert_eq!(json["outcome"], "recovered");
        assert_eq!(json["rel_error"], 0.0);
        assert_eq!(json["iterations"], 1);
        assert!(json["diagnostics"].is_object());
    }

    #[test]
    fn probe_examples() {
        let cloud: Vec<Matrix> = (0..50).map(|i| gaussian(3, 3, 900 + i)).collect();
        let e = MeasurementEnsemble::sample(EnsembleKind::Dense, 3, 3, 1, 1.0, 2).unwrap();
        let probe = injectivity_probe_exhaustive(&e, &cloud).unwrap();
        assert_eq!(probe.pairs, 1225);
        assert_eq!(probe.collisions, 0);
        // Brute-force oracle for the minimum gap.
        let mut oracle = f64::INFINITY;
        for i in 0..50 {
            for j in i + 1..50 {
                let d = cloud[i].sub(&cloud[j]).unwrap();
                oracle = oracle.min(e.apply(&d).unwrap().norm() / d.norm());
            }
        }
        assert_eq!(probe.min_gap, oracle);

        let empty = MeasurementEnsemble::sample(EnsembleKind::Dense, 3, 3, 0, 1.0, 2).unwrap();
        let spec = SupportSpec::point_cloud(cloud).unwrap();
        let probe = injectivity_probe(&empty, &spec, 40, 1).unwrap();
        assert_eq!(probe.collisions, 40);

        let e = MeasurementEnsemble::sample(EnsembleKind::Dense, 6, 6, 20, 1.0, 3).unwrap();
        let spec = SupportSpec::low_rank(6, 6, 1, 1.0).unwrap();
        assert_eq!(injectivity_probe(&e, &spec, 2000, 5).unwrap().collisions, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn altmin_is_scale_equivariant(seed in any::<u64>(), alpha in 0.01f64..100.0) {
            let e = MeasurementEnsemble::sample(EnsembleKind::Dense, 5, 5, 20, 1.0, seed).unwrap();
            let x = planted_low_rank(5, 5, 1, seed ^ 7);
            let y = e.apply(&x).unwrap();
            let opts = AltMinOptions { seed, ..AltMinOptions::new(1) };
            let base = decode_altmin(&e, &y, &opts).unwrap().with_truth(&x).unwrap();
            let scaled = decode_altmin(&e, &y.scale(alpha), &opts).unwrap().with_truth(&x.scale(alpha)).unwrap();
            let ok = |r: &DecodeResult| r.rel_error.unwrap() <= 1e-4;
            prop_assert_eq!(ok(&base), ok(&scaled));
            if ok(&base) {
                let diff = scaled.estimate().unwrap().distance(&base.estimate().unwrap().scale(alpha)).unwrap();
                prop_assert!(diff <= 1e-3 * alpha * x.norm());
            }
        }

        #[test]
        fn enumerate_recovery_matches_recount(seed in any::<u64>(), k in 0usize..3) {
            let cloud: Vec<Matrix> = (0..20).map(|i| gaussian(2, 2, seed.wrapping_add(i))).collect();
            let e = MeasurementEnsemble::sample(EnsembleKind::RankOne, 2, 2, k, 1.0, seed).unwrap();
            let y = e.apply(&cloud[3]).unwrap();
            let result = decode_enumerate(&e, &y, &cloud, 1e-9).unwrap();
            let within = cloud.iter().filter(|z| e.apply(z).unwrap().distance(&y).unwrap() <= 1e-9).count();
            prop_assert_eq!(result.is_recovered(), within == 1);
            prop_assert_eq!(result.diagnostics.consistent, within);
        }
    }
}
