//! One-step Monte Carlo forecasting.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::erf::erfc;

use super::{build_gamma_matrix, sample_prior, SgdlmModel, WeightedSample, REDUCE_CHUNK};
use crate::dlm::StatePartition;
use crate::error::{Error, Result};

/// Abort forecasting when more than this fraction of draws has a singular
/// `I - Γ`.
pub const MAX_DROPPED_FRACTION: f64 = 0.10;

/// Predictive mean `p_t` and covariance `P_t` of `y_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n_draws: usize,
}

/// Prior draws together with the per-draw conditional normal moments of
/// `y_t`. Holds everything needed for the forecast moments, the predictive
/// density of the realised observation and marginal predictive quantiles.
#[derive(Debug, Clone)]
pub struct PredictiveSample {
    sample: WeightedSample,
    partitions: Vec<StatePartition>,
    /// Draw indices with nonsingular `I - Γ`.
    kept: Vec<usize>,
    /// Weights of the kept draws, renormalised.
    weights: Vec<f64>,
    /// `μ` per kept draw.
    mu: Vec<DVector<f64>>,
    /// `A μ` per kept draw.
    cond_mean: Vec<DVector<f64>>,
    /// Square roots of `diag(Σ)` per kept draw.
    cond_sd: Vec<DVector<f64>>,
    log_abs_det: Vec<f64>,
    moments: ForecastMoments,
}

struct DrawMoments {
    mu: DVector<f64>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    log_abs_det: f64,
}

fn draw_moments(
    sample: &WeightedSample,
    partitions: &[StatePartition],
    predictors: &[DVector<f64>],
    r: usize,
) -> Result<Option<DrawMoments>> {
    let m = partitions.len();
    let gamma = build_gamma_matrix(sample, r, partitions)?;
    let i_minus_gamma = DMatrix::identity(m, m) - gamma;
    let lu = i_minus_gamma.lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Ok(None);
    }
    let Some(a) = lu.try_inverse() else {
        return Ok(None);
    };
    let mu = DVector::from_fn(m, |j, _| {
        let n_phi = partitions[j].n_phi();
        let phi = sample.states(j).view((0, r), (n_phi, 1));
        predictors[j].dot(&phi.column(0))
    });
    let mean = &a * &mu;
    let inv_lambda = DVector::from_fn(m, |j, _| 1.0 / sample.precisions(j)[r]);
    let scaled = DMatrix::from_fn(m, m, |i, k| a[(i, k)] * inv_lambda[k]);
    let cov = scaled * a.transpose();
    Ok(Some(DrawMoments {
        mu,
        mean,
        cov,
        log_abs_det: det.abs().ln(),
    }))
}

impl PredictiveSample {
    /// Compute per-draw forecast moments for a prior sample.
    ///
    /// `predictors[j]` is the external predictor vector `x_jt` of series `j`.
    /// Draws with singular `I - Γ` are dropped and the remaining weights
    /// renormalised; more than 10% dropped draws is an error.
    pub fn new(
        sample: WeightedSample,
        partitions: &[StatePartition],
        predictors: &[DVector<f64>],
    ) -> Result<Self> {
        let m = partitions.len();
        if predictors.len() != m {
            return Err(Error::Structure(format!(
                "{} predictor vectors for {m} series",
                predictors.len()
            )));
        }
        for (j, (x, part)) in predictors.iter().zip(partitions).enumerate() {
            if x.len() != part.n_phi() {
                return Err(Error::Structure(format!(
                    "series {j}: predictor has length {}, expected {}",
                    x.len(),
                    part.n_phi()
                )));
            }
        }
        let n = sample.n_draws();
        let per_draw: Vec<Result<Option<DrawMoments>>> = (0..n)
            .into_par_iter()
            .map(|r| draw_moments(&sample, partitions, predictors, r))
            .collect();

        let mut kept = Vec::with_capacity(n);
        let mut draws = Vec::with_capacity(n);
        for (r, d) in per_draw.into_iter().enumerate() {
            if let Some(d) = d? {
                kept.push(r);
                draws.push(d);
            }
        }
        let dropped = n - kept.len();
        if dropped as f64 > MAX_DROPPED_FRACTION * n as f64 {
            return Err(Error::conditioning(
                None,
                format!("{dropped} of {n} forecast draws have singular I - Gamma"),
            ));
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} of {n} forecast draws with singular I - Gamma");
        }

        let raw: Vec<f64> = kept.iter().map(|&r| sample.weights()[r]).collect();
        let total = super::chunked_sum(&raw);
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

        // Deterministic chunked reduction of Σ w Σ_r, Σ w mean_r, Σ w mean_r mean_r'.
        let partials: Vec<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> = draws
            .par_chunks(REDUCE_CHUNK)
            .zip(weights.par_chunks(REDUCE_CHUNK))
            .map(|(ds, ws)| {
                let mut cov = DMatrix::zeros(m, m);
                let mut mean = DVector::zeros(m);
                let mut outer = DMatrix::zeros(m, m);
                for (d, &w) in ds.iter().zip(ws) {
                    cov += &d.cov * w;
                    mean += &d.mean * w;
                    outer += &d.mean * d.mean.transpose() * w;
                }
                (cov, mean, outer)
            })
            .collect();
        let mut expected_cov = DMatrix::zeros(m, m);
        let mut mean = DVector::zeros(m);
        let mut outer = DMatrix::zeros(m, m);
        for (c, mu, o) in partials {
            expected_cov += c;
            mean += mu;
            outer += o;
        }
        let mut covariance = expected_cov + outer - &mean * mean.transpose();
        crate::linalg::symmetrize(&mut covariance);

        let mut mus = Vec::with_capacity(draws.len());
        let mut cond_mean = Vec::with_capacity(draws.len());
        let mut cond_sd = Vec::with_capacity(draws.len());
        let mut log_abs_det = Vec::with_capacity(draws.len());
        for d in draws {
            cond_sd.push(d.cov.diagonal().map(f64::sqrt));
            mus.push(d.mu);
            cond_mean.push(d.mean);
            log_abs_det.push(d.log_abs_det);
        }
        Ok(PredictiveSample {
            sample,
            partitions: partitions.to_vec(),
            kept,
            weights,
            mu: mus,
            cond_mean,
            cond_sd,
            log_abs_det,
            moments: ForecastMoments {
                mean,
                covariance,
                n_draws: n - dropped,
            },
        })
    }

    pub fn moments(&self) -> &ForecastMoments {
        &self.moments
    }

    pub fn n_dropped(&self) -> usize {
        self.sample.n_draws() - self.kept.len()
    }

    pub fn sample(&self) -> &WeightedSample {
        &self.sample
    }

    /// `log p(y | D_{t-1})`, the log of the weighted mixture of conditional
    /// normal densities.
    ///
    /// Each component is evaluated in structural form,
    /// `log|det(I - Γ)| + Σ_j log N(((I - Γ) y)_j; μ_j, 1/λ_j)`, which equals
    /// `log N(y; A μ, A Λ⁻¹ A')` without a per-draw factorisation.
    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        let m = self.partitions.len();
        if y.len() != m {
            return Err(Error::Structure(format!("observation has {} entries, expected {m}", y.len())));
        }
        if self.kept.is_empty() {
            return Err(Error::Numerical("no usable draws for the predictive density".into()));
        }
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let comps: Vec<f64> = self
            .kept
            .par_iter()
            .enumerate()
            .map(|(i, &r)| {
                let mut ll = self.log_abs_det[i];
                for (j, part) in self.partitions.iter().enumerate() {
                    let states = self.sample.states(j);
                    let mut u = y[j];
                    for (g, &k) in part.parents().iter().enumerate() {
                        u -= states[(part.n_phi() + g, r)] * y[k];
                    }
                    u -= self.mu[i][j];
                    let lambda = self.sample.precisions(j)[r];
                    ll += 0.5 * lambda.ln() - half_ln_2pi - 0.5 * lambda * u * u;
                }
                ll + self.weights[i].ln()
            })
            .collect();
        let max = comps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numerical("predictive density underflowed for every draw".into()));
        }
        let shifted: Vec<f64> = comps.iter().map(|c| (c - max).exp()).collect();
        Ok(max + super::chunked_sum(&shifted).ln())
    }

    /// Marginal predictive CDF of series `j` at `x`.
    pub fn marginal_cdf(&self, j: usize, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .cond_mean
            .iter()
            .zip(&self.cond_sd)
            .zip(&self.weights)
            .map(|((mean, sd), w)| {
                let z = (x - mean[j]) / sd[j];
                w * 0.5 * erfc(-z / std::f64::consts::SQRT_2)
            })
            .collect();
        super::chunked_sum(&terms)
    }

    /// Central predictive interval of series `j` with the given coverage.
    pub fn marginal_interval(&self, j: usize, level: f64) -> (f64, f64) {
        let tail = 0.5 * (1.0 - level);
        (self.marginal_quantile(j, tail), self.marginal_quantile(j, 1.0 - tail))
    }

    fn marginal_quantile(&self, j: usize, prob: f64) -> f64 {
        let (mut lo, mut hi) = self
            .cond_mean
            .iter()
            .zip(&self.cond_sd)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (mean, sd)| {
                (lo.min(mean[j] - 40.0 * sd[j]), hi.max(mean[j] + 40.0 * sd[j]))
            });
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.marginal_cdf(j, mid) < prob {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Predictive moments from a fresh prior sample.
pub fn forecast_moments(
    model: &SgdlmModel,
    predictors: &[DVector<f64>],
    n_draws: usize,
    seed: u64,
    time: u64,
) -> Result<ForecastMoments> {
    let sample = sample_prior(model, n_draws, seed, time)?;
    Ok(PredictiveSample::new(sample, &model.partitions, predictors)?.moments)
}

/// Predictive log density of `observation`; uses the same prior draws as
/// [`forecast_moments`] for equal `(seed, time)`.
pub fn predictive_log_density(
    model: &SgdlmModel,
    predictors: &[DVector<f64>],
    observation: &DVector<f64>,
    n_draws: usize,
    seed: u64,
    time: u64,
) -> Result<f64> {
    let sample = sample_prior(model, n_draws, seed, time)?;
    PredictiveSample::new(sample, &model.partitions, predictors)?.log_density(observation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlm::{BeliefRole, EvolutionSpec, NormalGammaBelief};
    use crate::engine::PredictorForm;

    /// Model whose draws are deterministic: zero scale matrices and a huge
    /// dof so that `λ` is essentially `1 / s`.
    fn fixed_model(parents: Vec<Vec<usize>>, means: Vec<Vec<f64>>, s: Vec<f64>) -> SgdlmModel {
        let m = parents.len();
        let beliefs = (0..m)
            .map(|j| {
                let p = means[j].len();
                NormalGammaBelief::new(
                    DVector::from_vec(means[j].clone()),
                    DMatrix::zeros(p, p),
                    1e12,
                    s[j],
                    BeliefRole::Prior,
                )
                .unwrap()
            })
            .collect();
        let parts = (0..m)
            .map(|j| StatePartition::new(j, 1, parents[j].clone()).unwrap())
            .collect();
        SgdlmModel::new(
            beliefs,
            parts,
            vec![EvolutionSpec::new(1.0, 1.0, 1.0).unwrap(); m],
            PredictorForm::LocalLevel,
        )
        .unwrap()
    }

    fn ones(m: usize) -> Vec<DVector<f64>> {
        vec![DVector::from_element(1, 1.0); m]
    }

    #[test]
    fn simultaneous_covariance_by_hand() {
        // Γ = [[0, 0.5], [0, 0]], λ = (1, 1), μ = 0 gives Σ = A A' with
        // A = [[1, 0.5], [0, 1]].
        let model = fixed_model(vec![vec![1], vec![]], vec![vec![0.0, 0.5], vec![0.0]], vec![1.0, 1.0]);
        let mom = forecast_moments(&model, &ones(2), 3, 1, 0).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let expected = &a * a.transpose();
        // λ draws deviate from 1/s by about 1e-6 at this dof.
        assert!((mom.covariance - &expected).abs().max() < 1e-5);
        assert!((expected - DMatrix::from_row_slice(2, 2, &[1.25, 0.5, 0.5, 1.0])).abs().max() < 1e-15);
        assert!(mom.mean.norm() < 1e-15);
    }

    #[test]
    fn decoupled_case_matches_direct_moments() {
        let b = NormalGammaBelief::new(
            DVector::from_element(1, 0.01),
            DMatrix::from_element(1, 1, 0.5),
            6.0,
            0.2,
            BeliefRole::Prior,
        )
        .unwrap();
        let model = SgdlmModel::new(
            vec![b.clone(), b],
            vec![StatePartition::new(0, 1, vec![]).unwrap(), StatePartition::new(1, 1, vec![]).unwrap()],
            vec![EvolutionSpec::new(1.0, 1.0, 1.0).unwrap(); 2],
            PredictorForm::LocalLevel,
        )
        .unwrap();
        let n = 2000;
        let sample = sample_prior(&model, n, 9, 4).unwrap();
        let pred = PredictiveSample::new(sample.clone(), &model.partitions, &ones(2)).unwrap();
        for j in 0..2 {
            let phi = sample.states(j).row(0);
            let mean_phi = phi.iter().sum::<f64>() / n as f64;
            let var_phi = phi.iter().map(|v| (v - mean_phi).powi(2)).sum::<f64>() / n as f64;
            let mean_inv = sample.precisions(j).iter().map(|l| 1.0 / l).sum::<f64>() / n as f64;
            assert!((pred.moments().mean[j] - mean_phi).abs() < 1e-12);
            assert!((pred.moments().covariance[(j, j)] - (mean_inv + var_phi)).abs() < 1e-10);
        }
    }

    #[test]
    fn single_draw_density_at_mean() {
        let model = fixed_model(vec![vec![]], vec![vec![0.2]], vec![0.04]);
        let y = DVector::from_element(1, 0.2);
        let ld = predictive_log_density(&model, &ones(1), &y, 1, 3, 0).unwrap();
        let sample = sample_prior(&model, 1, 3, 0).unwrap();
        let var = 1.0 / sample.precisions(0)[0];
        assert!((ld + 0.5 * (2.0 * std::f64::consts::PI * var).ln()).abs() < 1e-12);
    }

    #[test]
    fn two_component_mixture_density() {
        let b = NormalGammaBelief::new(
            DVector::from_element(1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            5.0,
            1.0,
            BeliefRole::Prior,
        )
        .unwrap();
        let model = SgdlmModel::new(
            vec![b],
            vec![StatePartition::new(0, 1, vec![]).unwrap()],
            vec![EvolutionSpec::new(1.0, 1.0, 1.0).unwrap()],
            PredictorForm::LocalLevel,
        )
        .unwrap();
        let sample = sample_prior(&model, 2, 1, 0).unwrap();
        let pred = PredictiveSample::new(sample.clone(), &model.partitions, &ones(1)).unwrap();
        let y = 0.7;
        let dens = |r: usize| {
            let mu = sample.states(0)[(0, r)];
            let var = 1.0 / sample.precisions(0)[r];
            (-(y - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
        };
        let direct = (0.5 * dens(0) + 0.5 * dens(1)).ln();
        let ld = pred.log_density(&DVector::from_element(1, y)).unwrap();
        assert!((ld - direct).abs() < 1e-12);
    }

    #[test]
    fn structural_density_matches_cholesky_route() {
        let model = fixed_model(
            vec![vec![1, 2], vec![2], vec![]],
            vec![vec![0.01, 0.4, -0.3], vec![-0.02, 0.5], vec![0.03]],
            vec![0.5, 2.0, 1.0],
        );
        let sample = sample_prior(&model, 1, 2, 0).unwrap();
        let pred = PredictiveSample::new(sample, &model.partitions, &ones(3)).unwrap();
        let y = DVector::from_vec(vec![0.3, -0.1, 0.2]);
        let ld = pred.log_density(&y).unwrap();
        let mom = pred.moments();
        let (quad, logdet) =
            crate::linalg::spd_quad_logdet(&mom.covariance, &(&y - &mom.mean)).unwrap();
        let direct = -1.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad;
        assert!((ld - direct).abs() < 1e-10, "{ld} vs {direct}");
    }

    #[test]
    fn singular_draws_abort_forecast() {
        // Γ = [[0, 1], [1, 0]] makes I - Γ singular in every draw.
        let model = fixed_model(vec![vec![1], vec![0]], vec![vec![0.0, 1.0], vec![0.0, 1.0]], vec![1.0, 1.0]);
        let err = forecast_moments(&model, &ones(2), 10, 0, 0).unwrap_err();
        assert!(matches!(err, Error::Conditioning { .. }));
    }

    #[test]
    fn interval_brackets_requested_mass() {
        let model = fixed_model(vec![vec![]], vec![vec![0.0]], vec![1.0]);
        let sample = sample_prior(&model, 4, 0, 0).unwrap();
        let pred = PredictiveSample::new(sample, &model.partitions, &ones(1)).unwrap();
        let (lo, hi) = pred.marginal_interval(0, 0.9);
        assert!((pred.marginal_cdf(0, lo) - 0.05).abs() < 1e-9);
        assert!((pred.marginal_cdf(0, hi) - 0.95).abs() < 1e-9);
        assert!((hi - 1.6448536269514722).abs() < 1e-4);
    }
}
