//! Seeded experiment runners and their CSV, SVG and metadata outputs.
//!
//! Every trial draws from `derive_seed(master_seed, tag, k, trial)` with fixed
//! sub-streams for the ensemble (1), the planted matrix (2) and the decoder (3).
//! Trials run on the ambient rayon pool and are collected in `(k, trial)`
//! order, so outputs do not depend on the number of workers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concentration::{bound_curve, geometric_grid, BoundReport, Spectrum, BOUND_CSV_HEADER, MC_PARTITION};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::measurement::{EnsembleKind, MeasurementEnsemble};
use crate::recovery::{decode_altmin, decode_enumerate, decode_sparse_factor, AltMinInit, AltMinOptions};
use crate::rng::{derive_seed, rng_from_seed, tag, RNG_ALGORITHM};
use crate::support::{
    check_sparse_factor_params, estimate_dim, manifold_dim, read_point_cloud, sample_sparse_factor_pair, sample_support, DimensionEstimate,
    SupportSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Phase,
    Concentration,
    Dimension,
    Example1,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Phase => "phase",
            ExperimentKind::Concentration => "concentration",
            ExperimentKind::Dimension => "dimension",
            ExperimentKind::Example1 => "example1",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Enumerate,
    AltMin,
    SparseFactor,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "enumerate" => Ok(DecoderKind::Enumerate),
            "altmin" => Ok(DecoderKind::AltMin),
            "sparsefactor" | "sparse-factor" | "sparse_factor" => Ok(DecoderKind::SparseFactor),
            other => Err(Error::Config(format!("unknown decoder `{other}`"))),
        }
    }
}

/// Support set sampled by a dimension run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportKind {
    /// Rank-`r` `m x n` matrices.
    LowRank,
    /// `X1^T X2` with `l1`- and `l2`-column-sparse factors.
    SparseFactor,
    /// The first factor set alone: `r x m` matrices with `l1` nonzero columns.
    FactorSet,
    /// `cloud_size` Gaussian `m x n` matrices, or the cloud in `points_path`.
    PointCloud,
}

impl std::str::FromStr for SupportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "lowrank" => Ok(SupportKind::LowRank),
            "sparsefactor" => Ok(SupportKind::SparseFactor),
            "factorset" => Ok(SupportKind::FactorSet),
            "pointcloud" => Ok(SupportKind::PointCloud),
            other => Err(Error::Config(format!("unknown support set `{other}`"))),
        }
    }
}

/// Declarative description of one run. Loaded from JSON over the preset for
/// its experiment kind; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub l1: usize,
    pub l2: usize,
    pub ensemble: EnsembleKind,
    pub s: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub k_step: usize,
    pub trials: u64,
    /// Also accepted as `seed` in config files.
    pub master_seed: u64,
    pub decoder: DecoderKind,
    pub output_path: Option<PathBuf>,

    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub init: AltMinInit,
    /// Relative error against the planted matrix that counts as a success.
    pub success_rel_err: f64,
    /// Support-pair cap for the sparse-factor decoder.
    pub budget: u64,
    /// Candidate-set size for the enumeration decoder and generated point clouds.
    pub cloud_size: usize,
    pub enumerate_tol: f64,

    pub support: SupportKind,
    pub samples: usize,
    pub rho_min: Option<f64>,
    pub rho_max: Option<f64>,
    pub levels: usize,
    /// Norm bound `L` of generated supports and sparse factors.
    pub bound: f64,
    pub points_path: Option<PathBuf>,

    /// Fixed matrix for concentration runs, as rows; random rank-`r` when absent.
    pub matrix: Option<Vec<Vec<f64>>>,

    /// Fill `wall_seconds`; off by default so outputs stay byte-reproducible.
    pub record_timing: bool,
    /// Worker threads; does not affect results.
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn preset(experiment: ExperimentKind) -> Self {
        let base = ExperimentConfig {
            experiment,
            m: 8,
            n: 8,
            r: 1,
            l1: 2,
            l2: 2,
            ensemble: EnsembleKind::Dense,
            s: 1.0,
            k_min: 5,
            k_max: 40,
            k_step: 5,
            trials: 200,
            master_seed: 0,
            decoder: DecoderKind::AltMin,
            output_path: None,
            restarts: 10,
            max_iters: 500,
            tol: 1e-10,
            init: AltMinInit::Spectral,
            success_rel_err: 1e-4,
            budget: 1_000_000,
            cloud_size: 100,
            enumerate_tol: 1e-9,
            support: SupportKind::LowRank,
            samples: 100_000,
            rho_min: None,
            rho_max: None,
            levels: 6,
            bound: 1.0,
            points_path: None,
            matrix: None,
            record_timing: false,
            workers: None,
        };
        match experiment {
            ExperimentKind::Phase => base,
            ExperimentKind::Example1 => ExperimentConfig {
                ensemble: EnsembleKind::RankOne,
                decoder: DecoderKind::SparseFactor,
                k_min: 2,
                k_max: 8,
                k_step: 1,
                trials: 100,
                success_rel_err: 1e-6,
                ..base
            },
            ExperimentKind::Concentration => ExperimentConfig {
                m: 4,
                n: 4,
                k_min: 1,
                k_max: 1,
                k_step: 1,
                trials: 1_000_000,
                ..base
            },
            ExperimentKind::Dimension => ExperimentConfig {
                m: 3,
                n: 3,
                cloud_size: 20,
                ..base
            },
        }
    }

    /// Preset for `experiment` with the keys of `json` laid over it. A
    /// `experiment` key in `json` must agree with `experiment` when both are given.
    pub fn from_json_over_preset(json: &str, experiment: Option<ExperimentKind>) -> Result<Self> {
        let overrides: serde_json::Value =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let serde_json::Value::Object(mut overrides) = overrides else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        if let Some(seed) = overrides.remove("seed") {
            if overrides.insert("master_seed".into(), seed).is_some() {
                return Err(Error::Config("give either `seed` or `master_seed`, not both".into()));
            }
        }
        let from_file = match overrides.get("experiment") {
            Some(v) => Some(
                serde_json::from_value::<ExperimentKind>(v.clone()).map_err(|e| Error::Config(format!("experiment: {e}")))?,
            ),
            None => None,
        };
        let kind = match (experiment, from_file) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("config is for `{}` but `{}` was requested", b.name(), a.name())));
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("config does not name an experiment".into())),
        };
        let mut merged = serde_json::to_value(Self::preset(kind))?;
        let target = merged.as_object_mut().expect("config serializes to an object");
        for (key, value) in overrides {
            target.insert(key, value);
        }
        serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn k_values(&self) -> Vec<usize> {
        (self.k_min..=self.k_max).step_by(self.k_step.max(1)).collect()
    }

    pub fn altmin_options(&self, rank: usize, seed: u64) -> AltMinOptions {
        AltMinOptions {
            rank,
            max_iters: self.max_iters,
            tol: self.tol,
            restarts: self.restarts,
            init: self.init,
            success_rel_err: self.success_rel_err,
            seed,
        }
    }

    /// Checks everything the selected experiment needs before any work starts.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.m == 0 || self.n == 0 {
            return fail(format!("matrix shape must be positive, got {}x{}", self.m, self.n));
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return fail(format!("s must be positive, got {}", self.s));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return fail(format!("bound must be positive, got {}", self.bound));
        }
        if self.workers == Some(0) {
            return fail("workers must be at least 1".into());
        }
        match self.experiment {
            ExperimentKind::Phase | ExperimentKind::Example1 => self.validate_phase(),
            ExperimentKind::Concentration => self.validate_concentration(),
            ExperimentKind::Dimension => self.validate_dimension(),
        }
    }

    fn validate_phase(&self) -> Result<()> {
        if self.k_min > self.k_max {
            return Err(Error::Config(format!("k_min {} exceeds k_max {}", self.k_min, self.k_max)));
        }
        if self.k_step == 0 {
            return Err(Error::Config("k_step must be at least 1".into()));
        }
        if self.experiment == ExperimentKind::Example1 && self.decoder != DecoderKind::SparseFactor {
            return Err(Error::Config("example1 runs the sparsefactor decoder".into()));
        }
        match self.decoder {
            DecoderKind::Enumerate => {
                if self.cloud_size < 1 {
                    return Err(Error::Config("cloud_size must be at least 1".into()));
                }
                if !(self.enumerate_tol > 0.0) {
                    return Err(Error::Config("enumerate_tol must be positive".into()));
                }
            }
            DecoderKind::AltMin => {
                if self.r < 1 || self.r > self.m.min(self.n) {
                    return Err(Error::Config(format!("r must lie in 1..=min(m, n), got {}", self.r)));
                }
                self.altmin_options(self.r, 0).validate()?;
            }
            DecoderKind::SparseFactor => {
                check_sparse_factor_params(self.m, self.n, self.r, self.l1, self.l2).map_err(|e| Error::Config(e.to_string()))?;
                self.altmin_options(self.r, 0).validate()?;
            }
        }
        Ok(())
    }

    fn validate_concentration(&self) -> Result<()> {
        if self.k_min < 1 {
            return Err(Error::Config("concentration runs need k_min >= 1".into()));
        }
        match &self.matrix {
            Some(rows) => {
                let x = Matrix::from_rows(rows).map_err(|e| Error::Config(format!("matrix: {e}")))?;
                Spectrum::of(&x).map_err(|e| Error::Config(format!("matrix: {e}")))?;
            }
            None => {
                if self.r < 1 || self.r > self.m.min(self.n) {
                    return Err(Error::Config(format!("r must lie in 1..=min(m, n), got {}", self.r)));
                }
            }
        }
        Ok(())
    }

    fn validate_dimension(&self) -> Result<()> {
        if self.levels < 4 {
            return Err(Error::Config(format!("levels must be at least 4, got {}", self.levels)));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if let (Some(lo), Some(hi)) = (self.rho_min, self.rho_max) {
            if !(lo > 0.0 && lo < hi) {
                return Err(Error::Config(format!("need 0 < rho_min < rho_max, got {lo} and {hi}")));
            }
        }
        if self.support == SupportKind::PointCloud && self.points_path.is_none() && self.cloud_size < 2 {
            return Err(Error::Config("a generated point cloud needs cloud_size >= 2".into()));
        }
        if self.support != SupportKind::PointCloud {
            self.support_spec(None).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn support_spec(&self, points: Option<Vec<Matrix>>) -> Result<SupportSpec> {
        match self.support {
            SupportKind::LowRank => SupportSpec::low_rank(self.m, self.n, self.r, self.bound),
            SupportKind::SparseFactor => SupportSpec::sparse_factor(self.m, self.n, self.r, self.l1, self.l2, self.bound),
            SupportKind::FactorSet => SupportSpec::column_sparse(self.r, self.m, self.l1, self.bound),
            SupportKind::PointCloud => SupportSpec::point_cloud(points.unwrap_or_default()),
        }
    }

    /// Copy for the metadata echo, without fields that may differ between
    /// otherwise identical runs.
    fn echo(&self) -> ExperimentConfig {
        ExperimentConfig {
            workers: None,
            ..self.clone()
        }
    }
}

/// One row of a phase sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub k: usize,
    pub trials: u64,
    pub successes: u64,
    pub success_rate: f64,
    /// Mean over trials whose decoder produced an estimate; NaN if none did.
    pub mean_rel_err: f64,
    pub median_iters: usize,
    pub wall_seconds: f64,
    /// Trials that ran but missed the success threshold.
    pub failures: u64,
    /// Trials refused by the sparse-factor support budget.
    pub budget_refusals: u64,
}

pub const PHASE_CSV_HEADER: &str = "k,trials,successes,success_rate,mean_rel_err,median_iters,wall_seconds";

impl SweepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.k, self.trials, self.successes, self.success_rate, self.mean_rel_err, self.median_iters, self.wall_seconds
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
struct TrialOutcome {
    success: bool,
    rel_error: Option<f64>,
    iterations: usize,
    budget_refused: bool,
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Rank-`r` `m x n` matrix `U V^T` with Gaussian factors.
pub fn planted_low_rank(m: usize, n: usize, r: usize, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    let u = gaussian_matrix(m, r, &mut rng);
    let v = gaussian_matrix(n, r, &mut rng);
    u.matmul(&v.transpose()).expect("factor shapes agree")
}

/// `cloud_size` Gaussian matrices; the candidate set of enumeration runs.
pub fn gaussian_cloud(m: usize, n: usize, size: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = rng_from_seed(seed);
    (0..size).map(|_| gaussian_matrix(m, n, &mut rng)).collect()
}

fn run_trial(config: &ExperimentConfig, cloud: &[Matrix], k: usize, trial_seed: u64) -> Result<TrialOutcome> {
    let (m, n) = (config.m, config.n);
    let e = MeasurementEnsemble::sample(config.ensemble, m, n, k, config.s, derive_seed(&[trial_seed, 1]))?;
    let planted_seed = derive_seed(&[trial_seed, 2]);
    let decoder_seed = derive_seed(&[trial_seed, 3]);
    match config.decoder {
        DecoderKind::Enumerate => {
            let index = rng_from_seed(planted_seed).random_range(0..cloud.len());
            let x = &cloud[index];
            let result = decode_enumerate(&e, &e.apply(x)?, cloud, config.enumerate_tol)?.with_truth(x)?;
            Ok(TrialOutcome {
                success: result.outcome == (crate::recovery::DecodeOutcome::Recovered { x_hat: x.clone() }),
                rel_error: result.rel_error,
                iterations: result.iterations,
                budget_refused: false,
            })
        }
        DecoderKind::AltMin => {
            let x = planted_low_rank(m, n, config.r, planted_seed);
            let result = decode_altmin(&e, &e.apply(&x)?, &config.altmin_options(config.r, decoder_seed))?.with_truth(&x)?;
            Ok(TrialOutcome {
                success: result.rel_error.is_some_and(|err| err <= config.success_rel_err),
                rel_error: result.rel_error,
                iterations: result.iterations,
                budget_refused: false,
            })
        }
        DecoderKind::SparseFactor => {
            let mut rng = rng_from_seed(planted_seed);
            let (x1, x2) = sample_sparse_factor_pair(m, n, config.r, config.l1, config.l2, config.bound, &mut rng);
            let x = x1.transpose().matmul(&x2)?;
            let opts = config.altmin_options(config.r, decoder_seed);
            match decode_sparse_factor(&e, &e.apply(&x)?, config.r, config.l1, config.l2, &opts, config.budget as u128) {
                Ok(result) => {
                    let result = result.with_truth(&x)?;
                    Ok(TrialOutcome {
                        success: result.is_recovered() && result.rel_error.is_some_and(|err| err <= config.success_rel_err),
                        rel_error: result.rel_error,
                        iterations: result.iterations,
                        budget_refused: false,
                    })
                }
                Err(Error::Budget { .. }) => Ok(TrialOutcome {
                    success: false,
                    rel_error: None,
                    iterations: 0,
                    budget_refused: true,
                }),
                Err(other) => Err(other),
            }
        }
    }
}

/// Seed of trial `trial` at sweep point `k`.
pub fn trial_seed(config: &ExperimentConfig, k: usize, trial: u64) -> u64 {
    derive_seed(&[config.master_seed, tag(config.experiment.name()), k as u64, trial])
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRun {
    pub records: Vec<SweepRecord>,
    /// `(m + n - r) r`.
    pub reference_dim: usize,
    /// `(l1 + l2) r` for sparse-factor runs.
    pub sparse_dim: Option<usize>,
}

/// Sweeps `k` and decodes `trials` planted instances at each point.
pub fn run_phase(config: &ExperimentConfig) -> Result<PhaseRun> {
    config.validate()?;
    if !matches!(config.experiment, ExperimentKind::Phase | ExperimentKind::Example1) {
        return Err(Error::Config(format!("`{}` is not a phase experiment", config.experiment.name())));
    }
    let cloud = match config.decoder {
        DecoderKind::Enumerate => gaussian_cloud(
            config.m,
            config.n,
            config.cloud_size,
            derive_seed(&[config.master_seed, tag("cloud")]),
        ),
        _ => Vec::new(),
    };
    let mut records = Vec::new();
    for k in config.k_values() {
        let start = Instant::now();
        let outcomes = (0..config.trials)
            .into_par_iter()
            .map(|t| run_trial(config, &cloud, k, trial_seed(config, k, t)))
            .collect::<Result<Vec<_>>>()?;
        let elapsed = start.elapsed().as_secs_f64();
        records.push(summarize(k, &outcomes, if config.record_timing { elapsed } else { 0.0 }));
    }
    let reference_dim = match config.decoder {
        DecoderKind::Enumerate => 0,
        _ => manifold_dim(config.m, config.n, config.r.min(config.m.min(config.n)))?,
    };
    Ok(PhaseRun {
        records,
        reference_dim,
        sparse_dim: (config.decoder == DecoderKind::SparseFactor).then_some((config.l1 + config.l2) * config.r),
    })
}

fn summarize(k: usize, outcomes: &[TrialOutcome], wall_seconds: f64) -> SweepRecord {
    let trials = outcomes.len() as u64;
    let successes = outcomes.iter().filter(|o| o.success).count() as u64;
    let budget_refusals = outcomes.iter().filter(|o| o.budget_refused).count() as u64;
    let errors: Vec<f64> = outcomes.iter().filter_map(|o| o.rel_error).collect();
    let mean_rel_err = if errors.is_empty() {
        f64::NAN
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    let mut iterations: Vec<usize> = outcomes.iter().map(|o| o.iterations).collect();
    iterations.sort_unstable();
    SweepRecord {
        k,
        trials,
        successes,
        success_rate: successes as f64 / trials as f64,
        mean_rel_err,
        median_iters: iterations[(iterations.len() - 1) / 2],
        wall_seconds,
        failures: trials - successes - budget_refusals,
        budget_refusals,
    }
}

/// The fixed matrix of a concentration run.
pub fn concentration_matrix(config: &ExperimentConfig) -> Result<Matrix> {
    match &config.matrix {
        Some(rows) => Matrix::from_rows(rows),
        None => Ok(planted_low_rank(
            config.m,
            config.n,
            config.r,
            derive_seed(&[config.master_seed, tag("matrix")]),
        )),
    }
}

/// Twelve thresholds from `1e-3` to `s^2 sigma_1`, with coupled Monte-Carlo
/// estimates and every analytic bound.
pub fn run_concentration(config: &ExperimentConfig) -> Result<Vec<BoundReport>> {
    config.validate()?;
    let x = concentration_matrix(config)?;
    let spectrum = Spectrum::of(&x)?;
    let hi = config.s * config.s * spectrum.sigma1;
    let lo = 1e-3f64.min(hi / 2.0);
    let deltas = geometric_grid(lo, hi, 12);
    bound_curve(
        &x,
        config.s,
        &deltas,
        config.k_min,
        config.trials,
        derive_seed(&[config.master_seed, tag("concentration")]),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimensionRun {
    pub estimate: DimensionEstimate,
    pub reference: f64,
    pub samples: usize,
    /// Fewer than ten samples per occupied cell at the finest level.
    pub undersampled: bool,
}

/// Samples the configured support set and fits the box-counting slope.
pub fn run_dimension(config: &ExperimentConfig) -> Result<DimensionRun> {
    config.validate()?;
    let seed = derive_seed(&[config.master_seed, tag("dimension")]);
    let (points, reference) = match config.support {
        SupportKind::PointCloud => {
            let cloud = match &config.points_path {
                Some(path) => read_point_cloud(path)?,
                None => gaussian_cloud(config.m, config.n, config.cloud_size, seed),
            };
            SupportSpec::point_cloud(cloud.clone())?;
            (cloud, 0.0)
        }
        _ => {
            let spec = config.support_spec(None)?;
            (sample_support(&spec, config.samples, seed)?, spec.reference_dim() as f64)
        }
    };
    let dim = points[0].as_slice().len();
    let rho_max = match (config.rho_max, config.support) {
        (Some(rho), _) => rho,
        (None, SupportKind::PointCloud) => min_pairwise_distance(&points) / 4.0,
        (None, _) => config.bound * (dim as f64).sqrt() / 2.0,
    };
    let rho_min = config.rho_min.unwrap_or(rho_max / 2f64.powi(config.levels as i32 - 1));
    if !(rho_max > 0.0 && rho_min < rho_max) {
        return Err(Error::Domain(format!("degenerate radius schedule [{rho_min}, {rho_max}]")));
    }
    let estimate = estimate_dim(&points, rho_min, rho_max, config.levels)?;
    Ok(DimensionRun {
        undersampled: config.support != SupportKind::PointCloud && !estimate.saturated(points.len()),
        estimate,
        reference,
        samples: points.len(),
    })
}

fn min_pairwise_distance(points: &[Matrix]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i].distance(&points[j]).expect("common shape");
            if d > 0.0 {
                best = best.min(d);
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunOutput {
    Phase(PhaseRun),
    Concentration(Vec<BoundReport>),
    Dimension(DimensionRun),
}

pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    match config.experiment {
        ExperimentKind::Phase | ExperimentKind::Example1 => run_phase(config).map(RunOutput::Phase),
        ExperimentKind::Concentration => run_concentration(config).map(RunOutput::Concentration),
        ExperimentKind::Dimension => run_dimension(config).map(RunOutput::Dimension),
    }
}

impl RunOutput {
    pub fn csv(&self) -> Result<String> {
        match self {
            RunOutput::Phase(run) => phase_csv(&run.records),
            RunOutput::Concentration(reports) => {
                if reports.is_empty() {
                    return Err(Error::Domain("no concentration rows to write".into()));
                }
                let mut out = format!("{BOUND_CSV_HEADER}\n");
                for row in reports {
                    out += &row.csv_row();
                    out.push('\n');
                }
                Ok(out)
            }
            RunOutput::Dimension(run) => {
                let mut buf = Vec::new();
                run.estimate.write_csv(&mut buf, run.reference).expect("writing to memory");
                Ok(String::from_utf8(buf).expect("ASCII output"))
            }
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        match self {
            RunOutput::Phase(run) => {
                let refused: u64 = run.records.iter().map(|r| r.budget_refusals).sum();
                if refused > 0 {
                    warnings.push(format!("{refused} trials exceeded the support budget"));
                }
            }
            RunOutput::Concentration(reports) => {
                let violations = reports.iter().filter(|r| !r.dominated()).count();
                if violations > 0 {
                    warnings.push(format!("{violations} thresholds where the empirical probability exceeds the bound"));
                }
            }
            RunOutput::Dimension(run) => {
                if run.undersampled {
                    warnings.push(format!(
                        "undersampled: {} samples for {} occupied cells at the finest level",
                        run.samples,
                        run.estimate.counts.last().copied().unwrap_or(0)
                    ));
                }
                if run.estimate.degenerate {
                    warnings.push("all covering counts are equal; slope reported as 0".into());
                }
            }
        }
        warnings
    }

    /// Run metadata written next to the CSV.
    pub fn metadata(&self, config: &ExperimentConfig) -> serde_json::Value {
        let mut meta = serde_json::json!({
            "experiment": config.experiment.name(),
            "config": config.echo(),
            "rng_algorithm": RNG_ALGORITHM,
            "seed_derivation": "derive_seed(master_seed, tag(experiment), k, trial); streams 1 ensemble, 2 planted, 3 decoder",
            "version": env!("CARGO_PKG_VERSION"),
            "warnings": self.warnings(),
        });
        let extra = match self {
            RunOutput::Phase(run) => serde_json::json!({
                "reference_dim": run.reference_dim,
                "sparse_dim": run.sparse_dim,
                "records": run.records,
            }),
            RunOutput::Concentration(reports) => serde_json::json!({
                "mc_partition": MC_PARTITION,
                "ci": "Wilson score, 99%",
                "violations": reports.iter().filter(|r| !r.dominated()).count(),
                "raw_bounds": reports.iter().map(|r| serde_json::json!({
                    "delta": r.delta,
                    "single_bound_raw": r.single_bound_raw,
                    "ln_k_bound_raw": r.ln_k_bound_raw,
                })).collect::<Vec<_>>(),
            }),
            RunOutput::Dimension(run) => serde_json::json!({
                "slope": run.estimate.slope,
                "reference": run.reference,
                "r2": run.estimate.r2,
                "local_slopes": run.estimate.local_slopes,
                "degenerate": run.estimate.degenerate,
                "samples": run.samples,
                "undersampled": run.undersampled,
            }),
        };
        let target = meta.as_object_mut().expect("object");
        for (key, value) in extra.as_object().expect("object") {
            target.insert(key.clone(), value.clone());
        }
        meta
    }

    /// Writes the CSV to `path`, the metadata to `<path>.meta.json`, and for
    /// phase runs an SVG plot to `path` with extension `svg`.
    pub fn write(&self, config: &ExperimentConfig, path: &Path) -> Result<()> {
        write_file(path, &self.csv()?)?;
        let meta = serde_json::to_string_pretty(&self.metadata(config))? + "\n";
        write_file(&meta_path(path), &meta)?;
        if let RunOutput::Phase(run) = self {
            emit_svg_plot(&run.records, run.reference_dim, &path.with_extension("svg"))?;
        }
        Ok(())
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn phase_csv(records: &[SweepRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Domain("no sweep records to write".into()));
    }
    let mut out = format!("{PHASE_CSV_HEADER}\n");
    for record in records {
        out += &record.csv_row();
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    write_file(path, &phase_csv(records)?)
}

/// Success rate against `k` with a dashed vertical line at `reference`.
pub fn svg_plot(records: &[SweepRecord], reference: usize) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Domain("no sweep records to plot".into()));
    }
    let (width, height, margin) = (640.0, 400.0, 50.0);
    let k_lo = records.iter().map(|r| r.k).min().expect("nonempty").min(reference) as f64;
    let k_hi = records.iter().map(|r| r.k).max().expect("nonempty").max(reference) as f64;
    let span = (k_hi - k_lo).max(1.0);
    let px = |k: f64| margin + (k - k_lo) / span * (width - 2.0 * margin);
    let py = |rate: f64| height - margin - rate * (height - 2.0 * margin);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{b:.2}" x2="{r:.2}" y2="{b:.2}" stroke="black"/><line x1="{m}" y1="{t:.2}" x2="{m}" y2="{b:.2}" stroke="black"/>"#,
        m = margin,
        b = py(0.0),
        t = py(1.0),
        r = width - margin
    );
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="12" text-anchor="end">{tick}</text>"#,
            x = margin - 6.0,
            y = py(tick) + 4.0
        );
    }
    let points: Vec<String> = records
        .iter()
        .map(|r| format!("{:.2},{:.2}", px(r.k as f64), py(r.success_rate)))
        .collect();
    let _ = writeln!(svg, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" "));
    for r in records {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/><text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            px(r.k as f64),
            py(r.success_rate),
            px(r.k as f64),
            py(0.0) + 18.0,
            r.k
        );
    }
    let x_ref = px(reference as f64);
    let _ = writeln!(
        svg,
        r#"<line x1="{x:.2}" y1="{t:.2}" x2="{x:.2}" y2="{b:.2}" stroke="firebrick" stroke-dasharray="6,4"/><text x="{tx:.2}" y="{ty:.2}" font-size="12" fill="firebrick">k* = {reference}</text>"#,
        x = x_ref,
        t = py(1.0),
        b = py(0.0),
        tx = x_ref + 4.0,
        ty = py(1.0) + 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">measurements k</text>"#,
        width / 2.0,
        height - 8.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_svg_plot(records: &[SweepRecord], reference: usize, path: &Path) -> Result<()> {
    write_file(path, &svg_plot(records, reference)?)
}

/// Spearman rank correlation with average ranks for ties. NaN when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}
