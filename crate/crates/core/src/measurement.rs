//! Random measurement ensembles and the linear map `X -> (<A_1, X>, ..., <A_k, X>)`.
//!
//! Two ensemble shapes are supported. Dense ensembles store every `A_i` as a
//! full `m x n` matrix drawn uniformly from the Frobenius ball of radius `s`.
//! Rank-one ensembles store `A_i = a_i b_i^T` through its factors, with `a_i`
//! and `b_i` drawn uniformly from the `m`- and `n`-dimensional balls of radius
//! `s`; they need `m + n` reals per measurement instead of `m n` and are
//! applied as `a_i . (X b_i)`.
//!
//! Sampled ensembles remember `(kind, m, n, k, s, seed)` and serialize to that
//! description only; the entries are regenerated on load.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{trace_inner, Matrix};
use crate::rng::{rng_from_seed, RNG_ALGORITHM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    Dense,
    #[serde(alias = "rank_one", alias = "rank-one")]
    RankOne,
}

impl std::fmt::Display for EnsembleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnsembleKind::Dense => "dense",
            EnsembleKind::RankOne => "rankone",
        })
    }
}

impl std::str::FromStr for EnsembleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(EnsembleKind::Dense),
            "rankone" | "rank-one" | "rank_one" => Ok(EnsembleKind::RankOne),
            other => Err(Error::Config(format!("unknown ensemble kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Functionals {
    Dense(Vec<Matrix>),
    RankOne { lefts: Vec<Vec<f64>>, rights: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementEnsemble {
    m: usize,
    n: usize,
    s: f64,
    seed: Option<u64>,
    functionals: Functionals,
}

/// Serialized form of a sampled ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub kind: EnsembleKind,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub s: f64,
    pub seed: u64,
    pub rng_algorithm: String,
}

impl EnsembleSpec {
    pub fn regenerate(&self) -> Result<MeasurementEnsemble> {
        if self.rng_algorithm != RNG_ALGORITHM {
            return Err(Error::Config(format!(
                "ensemble was generated with `{}`, this build uses `{RNG_ALGORITHM}`",
                self.rng_algorithm
            )));
        }
        MeasurementEnsemble::sample(self.kind, self.m, self.n, self.k, self.s, self.seed)
    }
}

/// Measurement vector `y`; finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementVector(Vec<f64>);

impl MeasurementVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("measurement vector has a non-finite entry".into()));
        }
        Ok(MeasurementVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, alpha: f64) -> MeasurementVector {
        MeasurementVector(self.0.iter().map(|v| alpha * v).collect())
    }

    /// `||self - other||_2`.
    pub fn distance(&self, other: &MeasurementVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Dimension {
                expected: format!("{} measurements", self.len()),
                got: format!("{} measurements", other.len()),
            });
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }
}

/// Draws a point uniformly from the `dim`-ball of radius `s`: a normalized
/// Gaussian direction scaled by `s * U^(1/dim)`.
pub fn sample_uniform_ball<R: Rng + ?Sized>(dim: usize, s: f64, rng: &mut R) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    fill_uniform_ball(&mut v, s, rng);
    v
}

/// [`sample_uniform_ball`] writing into `v`, whose length is the dimension.
pub fn fill_uniform_ball<R: Rng + ?Sized>(v: &mut [f64], s: f64, rng: &mut R) {
    let dim = v.len();
    assert!(dim >= 1 && s > 0.0, "ball sampling needs dim >= 1 and s > 0");
    loop {
        v.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
        let norm = l2(v);
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
            break;
        }
    }
    let radius = s * rng.random::<f64>().powf(1.0 / dim as f64);
    v.iter_mut().for_each(|x| *x *= radius);
    // Rounding in the normalization can push the norm a few ulps past s.
    let mut norm = l2(v);
    while norm > s {
        let shrink = s / norm * (1.0 - f64::EPSILON);
        v.iter_mut().for_each(|x| *x *= shrink);
        norm = l2(v);
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl MeasurementEnsemble {
    /// Samples `k` functionals. Equal arguments give bit-identical ensembles.
    pub fn sample(kind: EnsembleKind, m: usize, n: usize, k: usize, s: f64, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Domain(format!("ensemble shape must be positive, got {m}x{n}")));
        }
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Domain(format!("ball radius must be positive, got {s}")));
        }
        let mut rng = rng_from_seed(seed);
        let functionals = match kind {
            EnsembleKind::Dense => Functionals::Dense(
                (0..k)
                    .map(|_| Matrix::new(m, n, sample_uniform_ball(m * n, s, &mut rng)))
                    .collect::<Result<_>>()?,
            ),
            EnsembleKind::RankOne => {
                let mut lefts = Vec::with_capacity(k);
                let mut rights = Vec::with_capacity(k);
                for _ in 0..k {
                    lefts.push(sample_uniform_ball(m, s, &mut rng));
                    rights.push(sample_uniform_ball(n, s, &mut rng));
                }
                Functionals::RankOne { lefts, rights }
            }
        };
        Ok(MeasurementEnsemble {
            m,
            n,
            s,
            seed: Some(seed),
            functionals,
        })
    }

    /// Explicit dense ensemble; every matrix must be `m x n` with norm at most `s`.
    pub fn from_dense(m: usize, n: usize, s: f64, mats: Vec<Matrix>) -> Result<Self> {
        for a in &mats {
            if a.shape() != (m, n) {
                return Err(Error::shape((m, n), a.shape()));
            }
            if a.norm() > s {
                return Err(Error::Domain(format!("measurement norm {} exceeds radius {s}", a.norm())));
            }
        }
        Ok(MeasurementEnsemble {
            m,
            n,
            s,
            seed: None,
            functionals: Functionals::Dense(mats),
        })
    }

    /// Explicit rank-one ensemble `A_i = lefts[i] rights[i]^T`.
    pub fn from_rank_one(m: usize, n: usize, s: f64, lefts: Vec<Vec<f64>>, rights: Vec<Vec<f64>>) -> Result<Self> {
        if lefts.len() != rights.len() {
            return Err(Error::Dimension {
                expected: format!("{} right factors", lefts.len()),
                got: format!("{}", rights.len()),
            });
        }
        for (a, b) in lefts.iter().zip(&rights) {
            if a.len() != m || b.len() != n {
                return Err(Error::shape((m, n), (a.len(), b.len())));
            }
            if l2(a) > s || l2(b) > s {
                return Err(Error::Domain(format!("rank-one factor exceeds radius {s}")));
            }
        }
        Ok(MeasurementEnsemble {
            m,
            n,
            s,
            seed: None,
            functionals: Functionals::RankOne { lefts, rights },
        })
    }

    pub fn kind(&self) -> EnsembleKind {
        match self.functionals {
            Functionals::Dense(_) => EnsembleKind::Dense,
            Functionals::RankOne { .. } => EnsembleKind::RankOne,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        match &self.functionals {
            Functionals::Dense(mats) => mats.len(),
            Functionals::RankOne { lefts, .. } => lefts.len(),
        }
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn functionals(&self) -> &Functionals {
        &self.functionals
    }

    /// `A_i` as a full matrix.
    pub fn dense_matrix(&self, i: usize) -> Matrix {
        match &self.functionals {
            Functionals::Dense(mats) => mats[i].clone(),
            Functionals::RankOne { lefts, rights } => Matrix::outer(&lefts[i], &rights[i]),
        }
    }

    /// Same functionals stored densely.
    pub fn to_dense(&self) -> MeasurementEnsemble {
        MeasurementEnsemble {
            m: self.m,
            n: self.n,
            s: self.s,
            seed: None,
            functionals: Functionals::Dense((0..self.k()).map(|i| self.dense_matrix(i)).collect()),
        }
    }

    /// Restriction to the rows `row_idx` and columns `col_idx`: the ensemble
    /// acting on matrices supported on that block.
    pub fn restrict(&self, row_idx: &[usize], col_idx: &[usize]) -> MeasurementEnsemble {
        let functionals = match &self.functionals {
            Functionals::Dense(mats) => Functionals::Dense(
                mats.iter()
                    .map(|a| Matrix::from_fn(row_idx.len(), col_idx.len(), |i, j| a.get(row_idx[i], col_idx[j])))
                    .collect(),
            ),
            Functionals::RankOne { lefts, rights } => Functionals::RankOne {
                lefts: lefts.iter().map(|a| row_idx.iter().map(|&i| a[i]).collect()).collect(),
                rights: rights.iter().map(|b| col_idx.iter().map(|&j| b[j]).collect()).collect(),
            },
        };
        MeasurementEnsemble {
            m: row_idx.len(),
            n: col_idx.len(),
            s: self.s,
            seed: None,
            functionals,
        }
    }

    fn check_shape(&self, x: &Matrix) -> Result<()> {
        if x.shape() != (self.m, self.n) {
            return Err(Error::shape((self.m, self.n), x.shape()));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Matrix) -> Result<MeasurementVector> {
        self.check_shape(x)?;
        let values = match &self.functionals {
            Functionals::Dense(mats) => mats.iter().map(|a| trace_inner(a, x)).collect::<Result<_>>()?,
            Functionals::RankOne { lefts, rights } => lefts
                .iter()
                .zip(rights)
                .map(|(a, b)| dot(a, &x.mul_vec(b)))
                .collect(),
        };
        MeasurementVector::new(values)
    }

    /// Measures `X = U V^T` without forming `X`; `u` is `m x r`, `v` is `n x r`.
    /// Rank-one ensembles cost `O((m + n) r)` per measurement.
    pub fn apply_factored(&self, u: &Matrix, v: &Matrix) -> Result<MeasurementVector> {
        if u.rows() != self.m || v.rows() != self.n || u.cols() != v.cols() {
            return Err(Error::Dimension {
                expected: format!("factors {}xr and {}xr", self.m, self.n),
                got: format!("{}x{} and {}x{}", u.rows(), u.cols(), v.rows(), v.cols()),
            });
        }
        let values = match &self.functionals {
            Functionals::Dense(_) => return self.apply(&u.matmul(&v.transpose())?),
            Functionals::RankOne { lefts, rights } => {
                let (ut, vt) = (u.transpose(), v.transpose());
                lefts
                    .iter()
                    .zip(rights)
                    .map(|(a, b)| dot(&ut.mul_vec(a), &vt.mul_vec(b)))
                    .collect()
            }
        };
        MeasurementVector::new(values)
    }

    /// Number of stored reals.
    pub fn storage_cost(&self) -> usize {
        match self.kind() {
            EnsembleKind::Dense => self.k() * self.m * self.n,
            EnsembleKind::RankOne => self.k() * (self.m + self.n),
        }
    }

    /// Regeneration record; `None` for explicitly constructed ensembles.
    pub fn spec(&self) -> Option<EnsembleSpec> {
        self.seed.map(|seed| EnsembleSpec {
            kind: self.kind(),
            m: self.m,
            n: self.n,
            k: self.k(),
            s: self.s,
            seed,
            rng_algorithm: RNG_ALGORITHM.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let spec = self
            .spec()
            .ok_or_else(|| Error::Config("only sampled ensembles can be serialized".into()))?;
        Ok(serde_json::to_string(&spec)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str::<EnsembleSpec>(json)?.regenerate()
    }
}
