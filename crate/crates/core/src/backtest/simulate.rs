//! Synthetic panels drawn from a simultaneous system
//! `y = (I - Γ)⁻¹ (μ_t + ε_t)` with `ε_jt ~ N(0, 1/λ_j)` and known truth.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::SimulationConfig;
use super::data::ReturnsPanel;
use crate::error::{Error, Result};
use crate::rng::{Stage, StreamKey};

/// Smallest singular value of `I - Γ` accepted for generated structures.
const MIN_SINGULAR_VALUE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_steps: usize,
    /// Fixed simultaneous coefficients; zero diagonal.
    pub gamma: DMatrix<f64>,
    /// Initial levels `μ_0`.
    pub level: DVector<f64>,
    /// Standard deviation of the random-walk drift of the levels.
    pub level_drift_sd: f64,
    /// Observation precisions `λ_j`.
    pub precision: DVector<f64>,
    pub start_date: chrono::NaiveDate,
    pub seed: u64,
}

/// Ground truth returned with a simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub gamma: DMatrix<f64>,
    /// `T × m` levels `μ_t`.
    pub levels: DMatrix<f64>,
    pub precision: DVector<f64>,
}

impl SyntheticTruth {
    /// Parents of each series, ascending.
    pub fn parents(&self) -> Vec<Vec<usize>> {
        parents_of(&self.gamma)
    }
}

fn parents_of(gamma: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..gamma.nrows())
        .map(|j| (0..gamma.ncols()).filter(|&k| gamma[(j, k)] != 0.0).collect())
        .collect()
}

impl SyntheticSpec {
    /// Ring structure: series `j` has parents `j+1, ..., j+p (mod m)` with
    /// coefficients of random sign and magnitude in `[gamma_min, gamma_max]`.
    /// Coefficients are redrawn until `I - Γ` is comfortably nonsingular.
    pub fn ring(cfg: &SimulationConfig) -> Result<Self> {
        let m = cfg.n_series;
        let p = cfg.parents_per_series;
        if m == 0 || cfg.n_steps == 0 {
            return Err(Error::Config("simulation needs at least one series and one step".into()));
        }
        if p >= m {
            return Err(Error::Config(format!("{p} parents per series needs more than {p} series")));
        }
        if !(cfg.gamma_min >= 0.0 && cfg.gamma_max >= cfg.gamma_min) {
            return Err(Error::Config("sim.gamma_min/gamma_max must satisfy 0 <= min <= max".into()));
        }
        if !(cfg.volatility > 0.0 && cfg.level_drift_sd >= 0.0) {
            return Err(Error::Config("sim.volatility must be positive and sim.level_drift_sd non-negative".into()));
        }
        let key = StreamKey::new(cfg.seed, Stage::Simulation, u64::MAX);
        for attempt in 0..1000 {
            let mut rng = key.stream(0, attempt);
            let mut gamma = DMatrix::zeros(m, m);
            for j in 0..m {
                for d in 1..=p {
                    let mag = rng.random_range(cfg.gamma_min..=cfg.gamma_max);
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    gamma[(j, (j + d) % m)] = sign * mag;
                }
            }
            let svd = (DMatrix::identity(m, m) - &gamma).singular_values();
            if svd.min() >= MIN_SINGULAR_VALUE {
                return Ok(SyntheticSpec {
                    n_steps: cfg.n_steps,
                    gamma,
                    level: DVector::from_element(m, cfg.level),
                    level_drift_sd: cfg.level_drift_sd,
                    precision: DVector::from_element(m, cfg.volatility.powi(-2)),
                    start_date: cfg.start_date,
                    seed: cfg.seed,
                });
            }
        }
        Err(Error::Config("could not draw a well-conditioned simultaneous structure".into()))
    }

    pub fn n_series(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn parents(&self) -> Vec<Vec<usize>> {
        parents_of(&self.gamma)
    }

    fn validate(&self) -> Result<()> {
        let m = self.n_series();
        if self.gamma.ncols() != m || self.level.len() != m || self.precision.len() != m {
            return Err(Error::Config("synthetic spec dimensions disagree".into()));
        }
        if (0..m).any(|j| self.gamma[(j, j)] != 0.0) {
            return Err(Error::Config("synthetic Γ must have a zero diagonal".into()));
        }
        if self.precision.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config("synthetic precisions must be positive".into()));
        }
        Ok(())
    }

    /// Population covariance `(I - Γ)⁻¹ Λ⁻¹ (I - Γ)⁻ᵀ` of one observation.
    pub fn population_covariance(&self) -> Result<DMatrix<f64>> {
        let m = self.n_series();
        let a = (DMatrix::identity(m, m) - &self.gamma)
            .try_inverse()
            .ok_or_else(|| Error::Config("synthetic I - Γ is singular".into()))?;
        let inv_lambda = DMatrix::from_diagonal(&self.precision.map(|l| 1.0 / l));
        Ok(&a * inv_lambda * a.transpose())
    }
}

/// Generate a panel and its truth. Deterministic in `spec.seed`.
pub fn simulate(spec: &SyntheticSpec) -> Result<(ReturnsPanel, SyntheticTruth)> {
    spec.validate()?;
    let m = spec.n_series();
    let i_minus_gamma = DMatrix::identity(m, m) - &spec.gamma;
    let det = i_minus_gamma.clone().lu().determinant();
    if !det.is_finite() || det.abs() < 1e-10 {
        return Err(Error::Config(format!("synthetic I - Γ is singular (det = {det:e})")));
    }
    let a = i_minus_gamma
        .try_inverse()
        .ok_or_else(|| Error::Config("synthetic I - Γ is singular".into()))?;
    let sd = spec.precision.map(|l| 1.0 / l.sqrt());
    let mut level = spec.level.clone();
    let mut levels = DMatrix::zeros(spec.n_steps, m);
    let mut returns = DMatrix::zeros(spec.n_steps, m);
    for t in 0..spec.n_steps {
        let key = StreamKey::new(spec.seed, Stage::Simulation, t as u64);
        let mut shock = DVector::zeros(m);
        for j in 0..m {
            let mut rng = key.stream(j, 0);
            if t > 0 && spec.level_drift_sd > 0.0 {
                level[j] += spec.level_drift_sd * rng.sample::<f64, _>(StandardNormal);
            }
            shock[j] = level[j] + sd[j] * rng.sample::<f64, _>(StandardNormal);
        }
        levels.set_row(t, &level.transpose());
        returns.set_row(t, &(&a * shock).transpose());
    }
    let ids = (0..m).map(|j| format!("S{j:02}")).collect();
    let panel = ReturnsPanel::with_business_days(spec.start_date, ids, returns)?;
    Ok((
        panel,
        SyntheticTruth {
            gamma: spec.gamma.clone(),
            levels,
            precision: spec.precision.clone(),
        },
    ))
}
