//! Small-ball bounds for `a^T X b` with `a`, `b` uniform on balls, and their
//! Monte-Carlo checks.
//!
//! The single-measurement bound is `P[|a^T X b| <= delta] <= delta D f(X, s, delta)`
//! with
//!
//! ```text
//! D = 2 V(n-r,1) V(m-r,1) V(r-1,1) / (V(m,1) V(n,1))
//! f = (1/Delta(X)) * { 2/s^2 + (2/s^2) ln max(s^2 sigma_1 / delta, 1)             r = 1
//!                    { delta^(r-1) V(r,1)/s^(2r) + A(r-1,1) sigma_1^(r-1)/(s^2 (r-1))  r > 1
//! ```
//!
//! and the k-measurement bound is `(delta 2^((m+n)/2 - r) f)^k`. The simplified
//! constant `2^((m+n)/2 - r)` is not an upper bound on `D` for every shape
//! (for example `D_{5,6,9}` exceeds it); [`constant_audit`] reports where it fails.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ln_ball_volume, ln_sphere_area, svd, Matrix, DEFAULT_RANK_TOL};
use crate::measurement::{fill_uniform_ball, EnsembleKind, Functionals, MeasurementEnsemble};
use crate::rng::{derive_seed, rng_from_seed};

/// Monte-Carlo trials per partition. Each partition draws from its own derived
/// seed, so the result depends on the partitioning but not on the worker count.
pub const MC_PARTITION: u64 = 65_536;

/// Normal quantile for a two-sided 99% interval.
pub const Z_99: f64 = 2.575_829_303_548_900_4;

/// `D_{r,m,n}`, evaluated in the log-Gamma domain.
pub fn d_const(r: usize, m: usize, n: usize) -> Result<f64> {
    Ok(ln_d_const(r, m, n)?.exp())
}

fn ln_d_const(r: usize, m: usize, n: usize) -> Result<f64> {
    if r < 1 || r > m.min(n) {
        return Err(Error::Domain(format!("rank {r} must lie in 1..=min({m}, {n})")));
    }
    // Canonical operand order keeps the result exactly symmetric in (m, n).
    let (lo, hi) = (m.min(n), m.max(n));
    Ok(std::f64::consts::LN_2 + ln_ball_volume(lo - r, 1.0) + ln_ball_volume(hi - r, 1.0) + ln_ball_volume(r - 1, 1.0)
        - ln_ball_volume(lo, 1.0)
        - ln_ball_volume(hi, 1.0))
}

/// The simplified constant `2^((m+n)/2 - r)`.
pub fn d_paper_bound(r: usize, m: usize, n: usize) -> f64 {
    2f64.powf((m + n) as f64 / 2.0 - r as f64)
}

/// Spectral data of the fixed matrix that the bounds depend on.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub sigma1: f64,
    pub ln_delta: f64,
}

impl Spectrum {
    pub fn of(x: &Matrix) -> Result<Self> {
        let svd = svd(x, DEFAULT_RANK_TOL)?;
        let rank = svd.numerical_rank;
        if rank == 0 {
            return Err(Error::Domain("the bounds need a matrix of rank at least 1".into()));
        }
        let ln_delta = svd.singular_values[..rank].iter().map(|s| s.ln()).sum();
        Ok(Spectrum {
            m: x.rows(),
            n: x.cols(),
            rank,
            sigma1: svd.singular_values[0],
            ln_delta,
        })
    }

    /// `f(X, s, delta)`; `+inf` when `r = 1` and `delta = 0`.
    pub fn f(&self, s: f64, delta: f64) -> f64 {
        let r = self.rank;
        let inv_delta = (-self.ln_delta).exp();
        if r == 1 {
            if delta == 0.0 {
                return f64::INFINITY;
            }
            let log_term = (s * s * self.sigma1 / delta).max(1.0).ln();
            inv_delta * (2.0 / (s * s)) * (1.0 + log_term)
        } else {
            let ri = r as i32;
            let first = delta.powi(ri - 1) * ln_ball_volume(r, 1.0).exp() / s.powi(2 * ri);
            let second = ln_sphere_area(r - 1, 1.0).exp() * self.sigma1.powi(ri - 1) / (s * s * (r - 1) as f64);
            inv_delta * (first + second)
        }
    }

    /// `delta D f` before clipping; 0 at `delta = 0`.
    pub fn single_bound_raw(&self, s: f64, delta: f64) -> Result<f64> {
        if delta == 0.0 {
            return Ok(0.0);
        }
        Ok(delta * d_const(self.rank, self.m, self.n)? * self.f(s, delta))
    }

    /// `k ln(delta 2^((m+n)/2 - r) f)`; `-inf` at `delta = 0`.
    pub fn ln_k_bound_raw(&self, s: f64, delta: f64, k: usize) -> f64 {
        if delta == 0.0 {
            return f64::NEG_INFINITY;
        }
        let ln_factor = delta.ln() + ((self.m + self.n) as f64 / 2.0 - self.rank as f64) * std::f64::consts::LN_2 + self.f(s, delta).ln();
        k as f64 * ln_factor
    }
}

fn check_s_delta(s: f64, delta: f64) -> Result<()> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!("s must be positive, got {s}")));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!("delta must be nonnegative, got {delta}")));
    }
    Ok(())
}

/// `f(X, s, delta)`. Returns `+inf` for rank one at `delta = 0`, where the
/// probability being bounded is zero anyway.
pub fn f_bound(x: &Matrix, s: f64, delta: f64) -> Result<f64> {
    check_s_delta(s, delta)?;
    Ok(Spectrum::of(x)?.f(s, delta))
}

/// `min(1, delta D f)`.
pub fn lemma_bound_single(x: &Matrix, s: f64, delta: f64) -> Result<f64> {
    check_s_delta(s, delta)?;
    Ok(Spectrum::of(x)?.single_bound_raw(s, delta)?.min(1.0))
}

/// `min(1, delta^k 2^(k(m+n)/2 - kr) f^k)`.
pub fn lemma_bound_k(x: &Matrix, s: f64, delta: f64, k: usize) -> Result<f64> {
    check_s_delta(s, delta)?;
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    Ok(Spectrum::of(x)?.ln_k_bound_raw(s, delta, k).min(0.0).exp())
}

/// Half-width of the 99% Wilson score interval.
pub fn wilson_halfwidth(successes: u64, trials: u64) -> f64 {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z_99 * Z_99;
    Z_99 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n)
}

/// Counts of `|a^T X b| <= delta_j` over `trials` coupled draws, one count per
/// entry of `deltas`. The same draws serve every threshold, so counts are
/// monotone in `delta`.
pub fn mc_count_curve(x: &Matrix, s: f64, deltas: &[f64], trials: u64, seed: u64) -> Result<Vec<u64>> {
    if trials == 0 {
        return Err(Error::Domain("trials must be at least 1".into()));
    }
    for &d in deltas {
        check_s_delta(s, d)?;
    }
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&i, &j| deltas[i].total_cmp(&deltas[j]));
    let sorted: Vec<f64> = order.iter().map(|&i| deltas[i]).collect();

    let partitions = trials.div_ceil(MC_PARTITION);
    let buckets = (0..partitions)
        .into_par_iter()
        .map(|p| {
            let len = MC_PARTITION.min(trials - p * MC_PARTITION);
            partition_buckets(x, s, &sorted, len, derive_seed(&[seed, p]))
        })
        .reduce(
            || vec![0u64; sorted.len() + 1],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );

    // buckets[j] counts draws whose value falls first under sorted[j].
    let mut cumulative = vec![0u64; sorted.len()];
    let mut acc = 0;
    for j in 0..sorted.len() {
        acc += buckets[j];
        cumulative[j] = acc;
    }
    let mut counts = vec![0u64; deltas.len()];
    for (pos, &i) in order.iter().enumerate() {
        counts[i] = cumulative[pos];
    }
    Ok(counts)
}

fn partition_buckets(x: &Matrix, s: f64, sorted: &[f64], len: u64, seed: u64) -> Vec<u64> {
    let mut rng = rng_from_seed(seed);
    let (m, n) = x.shape();
    let mut a = vec![0.0; m];
    let mut b = vec![0.0; n];
    let mut buckets = vec![0u64; sorted.len() + 1];
    for _ in 0..len {
        fill_uniform_ball(&mut a, s, &mut rng);
        fill_uniform_ball(&mut b, s, &mut rng);
        let v = x.bilinear(&a, &b).abs();
        buckets[sorted.partition_point(|&d| d < v)] += 1;
    }
    buckets
}

/// Empirical `P[|a^T X b| <= delta]` and its 99% Wilson half-width.
pub fn mc_prob_single(x: &Matrix, s: f64, delta: f64, trials: u64, seed: u64) -> Result<(f64, f64)> {
    let count = mc_count_curve(x, s, &[delta], trials, seed)?[0];
    Ok((count as f64 / trials as f64, wilson_halfwidth(count, trials)))
}

/// `(||apply(e, x_center)||, 2 s^2 sqrt(k) rho + ||apply(e, x)||)` with
/// `rho = ||x - x_center||`. The first never exceeds the second.
pub fn perturbation_gap(e: &MeasurementEnsemble, x: &Matrix, x_center: &Matrix) -> Result<(f64, f64)> {
    if e.kind() != EnsembleKind::RankOne {
        return Err(Error::Domain("perturbation gap is defined for rank-one ensembles".into()));
    }
    debug_assert!(matches!(e.functionals(), Functionals::RankOne { .. }));
    let rho = x.distance(x_center)?;
    let lhs = e.apply(x_center)?.norm();
    let s = e.s();
    let rhs = 2.0 * s * s * (e.k() as f64).sqrt() * rho + e.apply(x)?.norm();
    Ok((lhs, rhs))
}

/// One row of a concentration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub s: f64,
    pub delta: f64,
    pub k: usize,
    pub trials: u64,
    pub empirical_prob: f64,
    pub ci_halfwidth: f64,
    pub f_value: f64,
    pub d_exact: f64,
    pub d_paper_bound: f64,
    /// `delta D f`, clipped to 1.
    pub single_bound: f64,
    /// `(delta 2^((m+n)/2 - r) f)^k`, clipped to 1.
    pub k_bound: f64,
    /// `delta D f` before clipping.
    pub single_bound_raw: f64,
    /// Natural log of the unclipped k-measurement bound.
    pub ln_k_bound_raw: f64,
}

impl BoundReport {
    /// `empirical - ci <= single_bound`.
    pub fn dominated(&self) -> bool {
        self.empirical_prob - self.ci_halfwidth <= self.single_bound
    }
}

pub const BOUND_CSV_HEADER: &str =
    "m,n,r,s,delta,k,trials,empirical_prob,ci_halfwidth,f_value,d_exact,d_paper_bound,single_bound,k_bound";

impl BoundReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.m,
            self.n,
            self.r,
            self.s,
            self.delta,
            self.k,
            self.trials,
            self.empirical_prob,
            self.ci_halfwidth,
            self.f_value,
            self.d_exact,
            self.d_paper_bound,
            self.single_bound,
            self.k_bound
        )
    }
}

/// Analytic bounds and coupled Monte-Carlo estimates over a grid of thresholds.
pub fn bound_curve(x: &Matrix, s: f64, deltas: &[f64], k: usize, trials: u64, seed: u64) -> Result<Vec<BoundReport>> {
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let spectrum = Spectrum::of(x)?;
    let counts = mc_count_curve(x, s, deltas, trials, seed)?;
    let d_exact = d_const(spectrum.rank, spectrum.m, spectrum.n)?;
    deltas
        .iter()
        .zip(counts)
        .map(|(&delta, count)| {
            let single_raw = spectrum.single_bound_raw(s, delta)?;
            let ln_k = spectrum.ln_k_bound_raw(s, delta, k);
            Ok(BoundReport {
                m: spectrum.m,
                n: spectrum.n,
                r: spectrum.rank,
                s,
                delta,
                k,
                trials,
                empirical_prob: count as f64 / trials as f64,
                ci_halfwidth: wilson_halfwidth(count, trials),
                f_value: spectrum.f(s, delta),
                d_exact,
                d_paper_bound: d_paper_bound(spectrum.rank, spectrum.m, spectrum.n),
                single_bound: single_raw.min(1.0),
                k_bound: ln_k.min(0.0).exp(),
                single_bound_raw: single_raw,
                ln_k_bound_raw: ln_k,
            })
        })
        .collect()
}

/// `points` geometrically spaced values from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![hi],
        _ => (0..points)
            .map(|j| {
                if j == points - 1 {
                    hi
                } else {
                    lo * (hi / lo).powf(j as f64 / (points - 1) as f64)
                }
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantAuditRow {
    pub r: usize,
    pub m: usize,
    pub n: usize,
    pub d_exact: f64,
    pub d_paper_bound: f64,
    pub bound_holds: bool,
}

/// `D_{r,m,n}` against `2^((m+n)/2 - r)` for all `1 <= r <= min(m,n)` and
/// `m, n <= max_dim`.
pub fn constant_audit(max_dim: usize) -> Vec<ConstantAuditRow> {
    let mut rows = Vec::new();
    for m in 1..=max_dim {
        for n in 1..=max_dim {
            for r in 1..=m.min(n) {
                let d_exact = d_const(r, m, n).expect("r in range");
                let bound = d_paper_bound(r, m, n);
                rows.push(ConstantAuditRow {
                    r,
                    m,
                    n,
                    d_exact,
                    d_paper_bound: bound,
                    bound_holds: d_exact <= bound,
                });
            }
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumePowerRow {
    pub k: usize,
    pub volume: f64,
    pub lower: f64,
    pub upper: f64,
    pub lower_strict: bool,
    pub upper_strict: bool,
}

/// `V(k,1)` against `2^(k/2)` and `2^k`.
pub fn volume_power_audit(max_k: usize) -> Vec<VolumePowerRow> {
    (1..=max_k)
        .map(|k| {
            let volume = ln_ball_volume(k, 1.0).exp();
            let lower = 2f64.powf(k as f64 / 2.0);
            let upper = 2f64.powi(k as i32);
            VolumePowerRow {
                k,
                volume,
                lower,
                upper,
                lower_strict: lower < volume,
                upper_strict: volume < upper,
            }
        })
        .collect()
}

/// Plain-text summary of both audits.
pub fn audit_report(max_dim: usize) -> String {
    let rows = constant_audit(max_dim);
    let failures: Vec<&ConstantAuditRow> = rows.iter().filter(|r| !r.bound_holds).collect();
    let mut out = format!(
        "D_{{r,m,n}} <= 2^((m+n)/2 - r) over 1 <= r <= min(m,n), m,n <= {max_dim}: holds in {} of {} cases\n",
        rows.len() - failures.len(),
        rows.len()
    );
    if let Some(worst) = failures
        .iter()
        .max_by(|a, b| (a.d_exact / a.d_paper_bound).total_cmp(&(b.d_exact / b.d_paper_bound)))
    {
        out += &format!(
            "largest violation: r={} m={} n={} D={:.6} bound={:.6} ratio={:.4}\n",
            worst.r,
            worst.m,
            worst.n,
            worst.d_exact,
            worst.d_paper_bound,
            worst.d_exact / worst.d_paper_bound
        );
    }
    out += "k,V(k;1),2^(k/2),2^k,lower_strict,upper_strict\n";
    for row in volume_power_audit(2 * max_dim) {
        out += &format!(
            "{},{:.6},{:.6},{:.6},{},{}\n",
            row.k, row.volume, row.lower, row.upper, row.lower_strict, row.upper_strict
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::{E, PI};

    #[test]
    fn d_const_examples() {
        assert_relative_eq!(d_const(1, 1, 1).unwrap(), 0.5, max_relative = 1e-14);
        assert_relative_eq!(d_const(1, 2, 2).unwrap(), 8.0 / (PI * PI), max_relative = 1e-14);
        // V(1,1) = 2, V(3,1) = 4 pi / 3.
        let v3 = 4.0 * PI / 3.0;
        assert_relative_eq!(d_const(2, 3, 3).unwrap(), 2.0 * 2.0 * 2.0 * 2.0 / (v3 * v3), max_relative = 1e-14);
        assert_relative_eq!(d_const(2, 3, 3).unwrap(), 9.0 / (PI * PI), max_relative = 1e-14);
        assert!(d_const(0, 2, 2).is_err());
        assert!(d_const(3, 2, 4).is_err());
    }

    #[test]
    fn simplified_bound_examples() {
        assert_eq!(d_paper_bound(1, 2, 2), 2.0);
        assert_eq!(d_paper_bound(1, 1, 1), 1.0);
        assert!(d_const(1, 2, 2).unwrap() <= 2.0);
    }

    #[test]
    fn simplified_constant_fails_somewhere() {
        let d = d_const(5, 6, 9).unwrap();
        assert!(d > d_paper_bound(5, 6, 9), "{d}");
        let row = &volume_power_audit(5)[4];
        assert!(!row.lower_strict);
        assert_relative_eq!(row.volume, 8.0 * PI * PI / 15.0, max_relative = 1e-14);
        // V(1,1) = 2 = 2^1, so the upper inequality is not strict at k = 1.
        let first = &volume_power_audit(1)[0];
        assert_relative_eq!(first.volume, first.upper, max_relative = 1e-14);
    }

    #[test]
    fn f_examples() {
        let one = Matrix::from_diag(&[1.0]);
        assert_relative_eq!(f_bound(&one, 1.0, 1.0).unwrap(), 2.0, max_relative = 1e-14);
        assert_relative_eq!(f_bound(&one, 1.0, 1.0 / E).unwrap(), 4.0, max_relative = 1e-14);
        let eye = Matrix::identity(2);
        assert_relative_eq!(f_bound(&eye, 1.0, 1.0).unwrap(), 3.0 * PI, max_relative = 1e-14);
        assert_eq!(f_bound(&one, 1.0, 0.0).unwrap(), f64::INFINITY);
        assert!(f_bound(&Matrix::zeros(2, 2), 1.0, 1.0).is_err());
    }

    #[test]
    fn single_bound_examples() {
        let eye = Matrix::identity(2);
        assert_eq!(lemma_bound_single(&eye, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(lemma_bound_single(&Matrix::from_diag(&[1.0]), 1.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(lemma_bound_single(&Matrix::from_diag(&[1.0]), 1.0, 1.0).unwrap(), 1.0, max_relative = 1e-14);
        let e11 = Matrix::from_fn(2, 2, |i, j| if (i, j) == (0, 0) { 1.0 } else { 0.0 });
        let expected = 0.1 * (8.0 / (PI * PI)) * (2.0 + 2.0 * 10f64.ln());
        assert_relative_eq!(lemma_bound_single(&e11, 1.0, 0.1).unwrap(), expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 0.5354, epsilon = 1e-4);
    }

    #[test]
    fn k_bound_examples() {
        let eye = Matrix::identity(3);
        for k in 1..5 {
            assert_eq!(lemma_bound_k(&eye, 1.0, 0.0, k).unwrap(), 0.0);
        }
        let x = Matrix::from_diag(&[2.0, 0.5, 0.0]);
        let spectrum = Spectrum::of(&x).unwrap();
        let delta = 1e-3;
        let single = delta * d_paper_bound(2, 3, 3) * spectrum.f(1.0, delta);
        assert!(single < 1.0);
        let bounds: Vec<f64> = (1..6).map(|k| lemma_bound_k(&x, 1.0, delta, k).unwrap()).collect();
        assert_relative_eq!(bounds[0], single, max_relative = 1e-12);
        assert!(bounds.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn k_bound_dominates_single_where_simplified_constant_holds() {
        let mut rng = rng_from_seed(4);
        for row in constant_audit(6).into_iter().filter(|r| r.bound_holds) {
            let x = Matrix::from_fn(row.m, row.n, |i, j| if i == j && i < row.r { 1.0 + rng.random::<f64>() } else { 0.0 });
            for delta in [1e-3, 0.05, 0.4] {
                let single = lemma_bound_single(&x, 1.0, delta).unwrap();
                let k1 = lemma_bound_k(&x, 1.0, delta, 1).unwrap();
                assert!(k1 >= single * (1.0 - 1e-12), "{row:?} {delta}");
            }
        }
    }

    #[test]
    fn audit_counts_cases() {
        let rows = constant_audit(12);
        let expected: usize = (1..=12).flat_map(|m| (1..=12).map(move |n| m.min(n))).sum();
        assert_eq!(rows.len(), expected);
        assert!(rows.iter().any(|r| !r.bound_holds));
        assert!(audit_report(12).contains("largest violation"));
    }

    #[test]
    fn wilson_interval_values() {
        // p = 0.5, n = 100: z sqrt(1/400 + z^2/40000) / (1 + z^2/100).
        let z = Z_99;
        let expected = z * (0.0025 + z * z / 40_000.0).sqrt() / (1.0 + z * z / 100.0);
        assert_relative_eq!(wilson_halfwidth(50, 100), expected, max_relative = 1e-14);
        assert!(wilson_halfwidth(0, 1000) > 0.0);
        assert!(wilson_halfwidth(1000, 1000) > 0.0);
    }

    #[test]
    fn scalar_case_matches_closed_form() {
        // m = n = 1: P[|a b sigma| <= delta] = t (1 + ln(1/t)) with t = delta/(s^2 sigma),
        // which the bound attains exactly.
        let x = Matrix::from_diag(&[1.5]);
        let s = 1.2;
        let deltas = [0.01, 0.1, 0.5, 1.0];
        let counts = mc_count_curve(&x, s, &deltas, 400_000, 8).unwrap();
        for (&delta, count) in deltas.iter().zip(counts) {
            let t: f64 = delta / (s * s * 1.5);
            let exact = t * (1.0 - t.ln());
            assert_relative_eq!(lemma_bound_single(&x, s, delta).unwrap(), exact, max_relative = 1e-12);
            let empirical = count as f64 / 400_000.0;
            assert!((empirical - exact).abs() <= wilson_halfwidth(count, 400_000), "{delta}: {empirical} vs {exact}");
        }
    }

    #[test]
    fn mc_endpoints() {
        let x = Matrix::from_diag(&[2.0, 1.0]);
        let (p, _) = mc_prob_single(&x, 1.0, 2.0, 10_000, 3).unwrap();
        assert_eq!(p, 1.0);
        let (p, _) = mc_prob_single(&x, 1.0, 0.0, 10_000, 3).unwrap();
        assert_eq!(p, 0.0);
        assert!(mc_prob_single(&x, 1.0, 0.1, 0, 3).is_err());
    }

    #[test]
    fn identity_bound_dominates_empirical() {
        let x = Matrix::identity(2);
        let (p, ci) = mc_prob_single(&x, 1.0, 0.05, 1_000_000, 11).unwrap();
        let bound = lemma_bound_single(&x, 1.0, 0.05).unwrap();
        assert!(p - ci <= bound, "{p} {ci} {bound}");
        assert!(p > 0.0);
    }

    #[test]
    fn partitioning_is_independent_of_threads() {
        let x = Matrix::from_diag(&[1.0, 0.5]);
        let deltas = geometric_grid(1e-3, 1.0, 12);
        let many = mc_count_curve(&x, 1.0, &deltas, 200_000, 5).unwrap();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| mc_count_curve(&x, 1.0, &deltas, 200_000, 5).unwrap());
        assert_eq!(many, one);
    }

    #[test]
    fn geometric_grid_endpoints() {
        let g = geometric_grid(1e-3, 2.0, 12);
        assert_eq!(g.len(), 12);
        assert_eq!(g[0], 1e-3);
        assert_eq!(g[11], 2.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn perturbation_gap_examples() {
        let e = MeasurementEnsemble::sample(EnsembleKind::RankOne, 3, 4, 5, 1.0, 2).unwrap();
        let x = Matrix::from_fn(3, 4, |i, j| (i + 2 * j) as f64 - 2.0);
        let (lhs, rhs) = perturbation_gap(&e, &x, &x).unwrap();
        assert_eq!(lhs, rhs);
        let (lhs, rhs) = perturbation_gap(&e, &x, &Matrix::zeros(3, 4)).unwrap();
        assert_eq!(lhs, 0.0);
        assert!(rhs >= 0.0);
        let dense = MeasurementEnsemble::sample(EnsembleKind::Dense, 3, 4, 5, 1.0, 2).unwrap();
        assert!(perturbation_gap(&dense, &x, &x).is_err());
        assert!(perturbation_gap(&e, &x, &Matrix::zeros(4, 3)).is_err());
    }

    proptest! {
        #[test]
        fn ln_k_bound_is_linear_in_k(seed in any::<u64>(), r in 1usize..4, delta in 1e-4f64..1.0, k in 1usize..30) {
            let mut rng = rng_from_seed(seed);
            let x = Matrix::from_fn(4, 5, |i, j| if i == j && i < r { 0.1 + rng.random::<f64>() } else { 0.0 });
            let spectrum = Spectrum::of(&x).unwrap();
            let one = spectrum.ln_k_bound_raw(1.0, delta, 1);
            let many = spectrum.ln_k_bound_raw(1.0, delta, k);
            prop_assert!((many - k as f64 * one).abs() <= 1e-12 * many.abs().max(1.0));
        }

        #[test]
        fn d_const_is_symmetric(r in 1usize..8, m in 1usize..16, n in 1usize..16) {
            prop_assume!(r <= m.min(n));
            prop_assert_eq!(d_const(r, m, n).unwrap(), d_const(r, n, m).unwrap());
            prop_assert!(d_const(r, m, n).unwrap() > 0.0);
        }

        #[test]
        fn empirical_curve_is_monotone(seed in any::<u64>(), lo in 1e-4f64..0.1) {
            let x = Matrix::from_diag(&[1.0, 0.3]);
            let deltas = geometric_grid(lo, 1.0, 8);
            let counts = mc_count_curve(&x, 1.0, &deltas, 2_000, seed).unwrap();
            prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn perturbation_inequality(seed in any::<u64>(), m in 1usize..9, n in 1usize..9, k in 1usize..21, s in 0.1f64..3.0) {
            let e = MeasurementEnsemble::sample(EnsembleKind::RankOne, m, n, k, s, seed).unwrap();
            let mut rng = rng_from_seed(seed ^ 1);
            let x = Matrix::from_fn(m, n, |_, _| rng.sample(StandardNormal));
            let c = Matrix::from_fn(m, n, |_, _| rng.sample(StandardNormal));
            let (lhs, rhs) = perturbation_gap(&e, &x, &c).unwrap();
            prop_assert!(lhs <= rhs);
        }
    }
}
