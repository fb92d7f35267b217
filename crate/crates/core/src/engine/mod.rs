//! Coupling of the per-series normal/gamma beliefs into the multivariate
//! SGDLM.
//!
//! Conditional on the states and precisions of all series, the vector of
//! observations is `y ~ N(A μ, A Λ⁻¹ A')` with `A = (I - Γ)⁻¹`. Forecasting is
//! done by drawing from the independent priors ([`forecast`]), the exact
//! posterior is represented by an importance sample weighted by
//! `|det(I - Γ)|` ([`recouple`]), and [`decouple`] projects that sample back
//! onto a product of normal/gammas.

pub mod decouple;
pub mod forecast;
pub mod recouple;

pub use decouple::{entropy_metric, solve_dof, vb_decouple, Decoupled, Entropy, VbStats};
pub use forecast::{forecast_moments, predictive_log_density, ForecastMoments, PredictiveSample};
pub use recouple::{recouple, RecoupleDiagnostics};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::dlm::{self, BeliefRole, EvolutionSpec, NormalGammaBelief, StatePartition};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{Stage, StreamKey};

/// Number of draws reduced sequentially before partial results are combined.
/// Fixed so that reductions do not depend on the thread count.
pub(crate) const REDUCE_CHUNK: usize = 256;

/// External predictor layout shared by all series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorForm {
    /// `F = 1`: local level only.
    LocalLevel,
    /// `F = (1, x)` with `x` the mean of the last five one-step errors.
    LaggedErrorMean,
}

impl PredictorForm {
    pub fn n_phi(self) -> usize {
        match self {
            PredictorForm::LocalLevel => 1,
            PredictorForm::LaggedErrorMean => 2,
        }
    }
}

/// The set of `m` coupled univariate models.
#[derive(Debug, Clone)]
pub struct SgdlmModel {
    pub beliefs: Vec<NormalGammaBelief>,
    pub partitions: Vec<StatePartition>,
    pub evolution: Vec<EvolutionSpec>,
    pub predictor: PredictorForm,
}

impl SgdlmModel {
    pub fn new(
        beliefs: Vec<NormalGammaBelief>,
        partitions: Vec<StatePartition>,
        evolution: Vec<EvolutionSpec>,
        predictor: PredictorForm,
    ) -> Result<Self> {
        let model = SgdlmModel {
            beliefs,
            partitions,
            evolution,
            predictor,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn n_series(&self) -> usize {
        self.beliefs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.beliefs.len();
        if self.partitions.len() != m || self.evolution.len() != m {
            return Err(Error::Structure(format!(
                "{m} beliefs but {} partitions and {} evolution specs",
                self.partitions.len(),
                self.evolution.len()
            )));
        }
        for (j, (b, part)) in self.beliefs.iter().zip(&self.partitions).enumerate() {
            if part.owner() != j {
                return Err(Error::Structure(format!(
                    "partition at position {j} belongs to series {}",
                    part.owner()
                )));
            }
            if part.dim() != b.dim() {
                return Err(Error::Structure(format!(
                    "series {j}: partition has {} states, belief has {}",
                    part.dim(),
                    b.dim()
                )));
            }
            if part.n_phi() != self.predictor.n_phi() {
                return Err(Error::Structure(format!(
                    "series {j}: {} predictor coefficients, predictor form needs {}",
                    part.n_phi(),
                    self.predictor.n_phi()
                )));
            }
            if let Some(&k) = part.parents().iter().find(|&&k| k >= m) {
                return Err(Error::Structure(format!("series {j}: parent {k} out of range")));
            }
        }
        Ok(())
    }

    /// Evolve every series' posterior into its next prior.
    pub fn evolve_all(&mut self) -> Result<()> {
        let evolved: Result<Vec<_>> = self
            .beliefs
            .par_iter()
            .zip(self.evolution.par_iter())
            .zip(self.partitions.par_iter())
            .map(|((b, spec), part)| dlm::evolve(b, spec, part))
            .collect();
        self.beliefs = evolved?;
        Ok(())
    }
}

/// Monte Carlo draws of all states and precisions with importance weights.
///
/// States are stored per series as a `p_j × R` matrix (one column per draw).
#[derive(Debug, Clone)]
pub struct WeightedSample {
    states: Vec<DMatrix<f64>>,
    precisions: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedSample {
    /// Build a sample with uniform weights.
    pub fn uniform(states: Vec<DMatrix<f64>>, precisions: Vec<Vec<f64>>) -> Result<Self> {
        let n_draws = precisions.first().map_or(0, Vec::len);
        if states.len() != precisions.len()
            || states.iter().any(|s| s.ncols() != n_draws)
            || precisions.iter().any(|l| l.len() != n_draws)
        {
            return Err(Error::Structure("inconsistent sample dimensions".into()));
        }
        if precisions.iter().flatten().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Numerical("sampled precision is not strictly positive".into()));
        }
        Ok(WeightedSample {
            states,
            precisions,
            log_weights: vec![0.0; n_draws],
            weights: vec![1.0 / n_draws as f64; n_draws],
        })
    }

    pub fn n_draws(&self) -> usize {
        self.log_weights.len()
    }

    pub fn n_series(&self) -> usize {
        self.states.len()
    }

    /// `p_j × R` matrix of state draws for series `j`.
    pub fn states(&self, j: usize) -> &DMatrix<f64> {
        &self.states[j]
    }

    pub fn precisions(&self, j: usize) -> &[f64] {
        &self.precisions[j]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Normalised importance weights (sum to one).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Replace the log weights and renormalise with max-shifting. Draws with
    /// `-inf` log weight get zero weight.
    pub fn set_log_weights(&mut self, log_weights: Vec<f64>) -> Result<()> {
        if log_weights.len() != self.n_draws() {
            return Err(Error::Structure("log weight vector has the wrong length".into()));
        }
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numerical("all importance weights are zero".into()));
        }
        let unnorm: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
        let total = chunked_sum(&unnorm);
        self.weights = unnorm.iter().map(|w| w / total).collect();
        self.log_weights = log_weights;
        Ok(())
    }

    /// Effective sample size `1 / Σ w̄²`.
    pub fn ess(&self) -> f64 {
        if self.weights.iter().all(|&w| w == self.weights[0]) {
            return self.n_draws() as f64;
        }
        let sq: Vec<f64> = self.weights.iter().map(|w| w * w).collect();
        1.0 / chunked_sum(&sq)
    }

    /// Apply a permutation to the draw order (used by symmetry tests).
    pub fn permuted(&self, order: &[usize]) -> Self {
        let states = self
            .states
            .iter()
            .map(|s| DMatrix::from_fn(s.nrows(), order.len(), |i, r| s[(i, order[r])]))
            .collect();
        let precisions = self
            .precisions
            .iter()
            .map(|l| order.iter().map(|&r| l[r]).collect())
            .collect();
        WeightedSample {
            states,
            precisions,
            log_weights: order.iter().map(|&r| self.log_weights[r]).collect(),
            weights: order.iter().map(|&r| self.weights[r]).collect(),
        }
    }
}

/// Sum in fixed-size sequential chunks, then combine chunk totals in order.
pub(crate) fn chunked_sum(values: &[f64]) -> f64 {
    values
        .chunks(REDUCE_CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

/// Draw `n_draws` samples from a product of independent normal/gammas.
///
/// For each series and draw: `λ ~ Gamma(n/2, rate n s / 2)` and
/// `θ | λ ~ N(mean, scale / (s λ))`.
pub fn sample_normal_gamma(
    beliefs: &[NormalGammaBelief],
    n_draws: usize,
    seed: u64,
    stage: Stage,
    time: u64,
) -> Result<WeightedSample> {
    if n_draws == 0 {
        return Err(Error::Config("number of draws must be positive".into()));
    }
    let key = StreamKey::new(seed, stage, time);
    let per_series: Result<Vec<(DMatrix<f64>, Vec<f64>)>> = beliefs
        .par_iter()
        .enumerate()
        .map(|(j, b)| {
            let p = b.dim();
            let l = linalg::psd_factor(&b.scale, dlm::PSD_TOL).ok_or_else(|| {
                Error::conditioning(Some(j), "scale matrix is not positive semi-definite")
            })?;
            let shape = 0.5 * b.dof;
            let rate = 0.5 * b.dof * b.precision_scale;
            let gamma = Gamma::new(shape, 1.0 / rate)
                .map_err(|e| Error::conditioning(Some(j), format!("gamma parameters: {e}")))?;
            let draws: Vec<(DVector<f64>, f64)> = (0..n_draws)
                .into_par_iter()
                .map(|r| {
                    let mut rng = key.stream(j, r);
                    let lambda: f64 = gamma.sample(&mut rng).max(f64::MIN_POSITIVE);
                    let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let theta = &b.mean + (&l * z) / (b.precision_scale * lambda).sqrt();
                    (theta, lambda)
                })
                .collect();
            let mut states = DMatrix::zeros(p, n_draws);
            let mut lambdas = Vec::with_capacity(n_draws);
            for (r, (theta, lambda)) in draws.into_iter().enumerate() {
                states.set_column(r, &theta);
                lambdas.push(lambda);
            }
            Ok((states, lambdas))
        })
        .collect();
    let (states, precisions) = per_series?.into_iter().unzip();
    WeightedSample::uniform(states, precisions)
}

/// Joint prior draws for forecasting at `time`.
pub fn sample_prior(model: &SgdlmModel, n_draws: usize, seed: u64, time: u64) -> Result<WeightedSample> {
    if model.beliefs.iter().any(|b| b.role != BeliefRole::Prior) {
        return Err(Error::Contract("sample_prior expects evolved prior beliefs".into()));
    }
    sample_normal_gamma(&model.beliefs, n_draws, seed, Stage::Forecast, time)
}

/// `Γ` for one draw: row `j` holds the draw's `γ` block at the columns of the
/// parents of `j`.
pub fn build_gamma_matrix(
    sample: &WeightedSample,
    draw: usize,
    partitions: &[StatePartition],
) -> Result<DMatrix<f64>> {
    let m = partitions.len();
    if sample.n_series() != m {
        return Err(Error::Structure("sample and partitions disagree on the series count".into()));
    }
    let mut gamma = DMatrix::zeros(m, m);
    for (j, part) in partitions.iter().enumerate() {
        let states = sample.states(j);
        if states.nrows() != part.dim() {
            return Err(Error::Structure(format!("series {j}: draw dimension mismatch")));
        }
        for (i, &k) in part.parents().iter().enumerate() {
            if k == j {
                return Err(Error::Structure(format!("series {j} lists itself as a parent")));
            }
            if k >= m {
                return Err(Error::Structure(format!("series {j}: parent {k} out of range")));
            }
            gamma[(j, k)] = states[(part.n_phi() + i, draw)];
        }
    }
    Ok(gamma)
}

/// Flatten a `Γ` matrix into per-series parent coefficient lists (the inverse
/// of [`build_gamma_matrix`] for a given structure).
pub fn gamma_rows(gamma: &DMatrix<f64>, partitions: &[StatePartition]) -> Vec<Vec<f64>> {
    partitions
        .iter()
        .enumerate()
        .map(|(j, part)| part.parents().iter().map(|&k| gamma[(j, k)]).collect())
        .collect()
}
