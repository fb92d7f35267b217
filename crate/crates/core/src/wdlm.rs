//! Matrix-normal/inverse-Wishart multivariate DLM with Beta-Bartlett
//! volatility discounting.
//!
//! All series share one regressor vector `F`; the `p × m` state matrix has a
//! matrix normal prior with within-column scale `R` and the observation
//! covariance `Σ` an inverse Wishart prior with dof `r` and sum-of-squares
//! matrix `B`. Used both as a benchmark forecaster and as the proposal model
//! for parental selection.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::dlm::BeliefRole;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixNIWBelief {
    /// `p × m` state mode (`a_t` or `m_t`).
    pub state_mode: DMatrix<f64>,
    /// `p × p` within-column scale (`R_t` or `C_t`).
    pub state_scale: DMatrix<f64>,
    pub dof: f64,
    /// `m × m` sum-of-squares matrix (`B_t` or `D_t`).
    pub sum_squares: DMatrix<f64>,
    pub role: BeliefRole,
}

impl MatrixNIWBelief {
    /// Weakly informative prior at daily-return scale: zero mode,
    /// `R = 1e-2 I`, `r = m + 2` and `B = 1e-4 (r - 2) I` so that the prior mean
    /// of `Σ` is `1e-4 I`.
    pub fn default_prior(p: usize, m: usize) -> Self {
        let dof = m as f64 + 2.0;
        MatrixNIWBelief {
            state_mode: DMatrix::zeros(p, m),
            state_scale: DMatrix::identity(p, p) * 1e-2,
            dof,
            sum_squares: DMatrix::identity(m, m) * (1e-4 * (dof - 2.0)),
            role: BeliefRole::Prior,
        }
    }

    pub fn n_series(&self) -> usize {
        self.sum_squares.nrows()
    }

    pub fn n_regressors(&self) -> usize {
        self.state_scale.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (p, m) = (self.n_regressors(), self.n_series());
        if self.state_mode.shape() != (p, m) || self.state_scale.ncols() != p || self.sum_squares.ncols() != m {
            return Err(Error::Structure("inconsistent Wishart DLM dimensions".into()));
        }
        if !(self.dof > 0.0) {
            return Err(Error::conditioning(None, format!("Wishart DLM dof {} not positive", self.dof)));
        }
        if self.sum_squares.clone().cholesky().is_none() {
            return Err(Error::conditioning(None, "sum-of-squares matrix is not positive definite"));
        }
        Ok(())
    }
}

/// One-step multivariate T forecast `T_r(f, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WdlmForecast {
    pub mode: DVector<f64>,
    /// Scale matrix `Q = q B / r`.
    pub scale: DMatrix<f64>,
    pub dof: f64,
    /// `q B / (r - 2)`; `None` when `r ≤ 2`.
    pub covariance: Option<DMatrix<f64>>,
}

impl WdlmForecast {
    /// Log density of the multivariate T forecast at `y`.
    pub fn ln_density(&self, y: &DVector<f64>) -> Result<f64> {
        let m = y.len() as f64;
        let n = self.dof;
        let (quad, logdet) = linalg::spd_quad_logdet(&self.scale, &(y - &self.mode))
            .ok_or_else(|| Error::conditioning(None, "forecast scale matrix is not positive definite"))?;
        Ok(ln_gamma(0.5 * (n + m)) - ln_gamma(0.5 * n) - 0.5 * m * (n * std::f64::consts::PI).ln()
            - 0.5 * logdet
            - 0.5 * (n + m) * (1.0 + quad / n).ln())
    }
}

/// Evolve with random-walk states (`G = I`), `R = C / δ`, `r = β n` and
/// `B = D (r + m - 1) / (n + m - 1)`.
pub fn wdlm_evolve(posterior: &MatrixNIWBelief, delta: f64, beta: f64) -> Result<MatrixNIWBelief> {
    if posterior.role != BeliefRole::Posterior {
        return Err(Error::Contract("wdlm_evolve expects a posterior belief".into()));
    }
    if !(delta > 0.0 && delta <= 1.0 && beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("Wishart DLM discounts ({delta}, {beta}) outside (0, 1]")));
    }
    let m = posterior.n_series() as f64;
    let dof = beta * posterior.dof;
    Ok(MatrixNIWBelief {
        state_mode: posterior.state_mode.clone(),
        state_scale: &posterior.state_scale / delta,
        dof,
        sum_squares: &posterior.sum_squares * ((dof + m - 1.0) / (posterior.dof + m - 1.0)),
        role: BeliefRole::Prior,
    })
}

pub fn wdlm_forecast(prior: &MatrixNIWBelief, regressor: &DVector<f64>) -> Result<WdlmForecast> {
    if regressor.len() != prior.n_regressors() {
        return Err(Error::Structure("regressor length does not match the Wishart DLM state".into()));
    }
    let mode = prior.state_mode.transpose() * regressor;
    let q = 1.0 + regressor.dot(&(&prior.state_scale * regressor));
    let r = prior.dof;
    let covariance = (r > 2.0).then(|| &prior.sum_squares * (q / (r - 2.0)));
    Ok(WdlmForecast {
        mode,
        scale: &prior.sum_squares * (q / r),
        dof: r,
        covariance,
    })
}

pub fn wdlm_update(
    prior: &MatrixNIWBelief,
    regressor: &DVector<f64>,
    observation: &DVector<f64>,
) -> Result<MatrixNIWBelief> {
    if prior.role != BeliefRole::Prior {
        return Err(Error::Contract("wdlm_update expects a prior belief".into()));
    }
    if observation.len() != prior.n_series() || regressor.len() != prior.n_regressors() {
        return Err(Error::Structure("observation or regressor has the wrong length".into()));
    }
    let rf = &prior.state_scale * regressor;
    let q = 1.0 + regressor.dot(&rf);
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::Numerical(format!("Wishart DLM forecast factor q = {q} is not positive")));
    }
    let e = observation - prior.state_mode.transpose() * regressor;
    let a = rf / q;
    let mut state_scale = &prior.state_scale - &a * a.transpose() * q;
    linalg::symmetrize(&mut state_scale);
    let mut sum_squares = &prior.sum_squares + &e * e.transpose() / q;
    linalg::symmetrize(&mut sum_squares);
    Ok(MatrixNIWBelief {
        state_mode: &prior.state_mode + &a * e.transpose(),
        state_scale,
        dof: prior.dof + 1.0,
        sum_squares,
        role: BeliefRole::Posterior,
    })
}

/// Point estimate of the precision matrix used to rank candidate parents:
/// `D⁻¹`, proportional to the posterior mean of `Σ⁻¹`. Returns the estimate
/// and whether a ridge had to be added.
pub fn precision_estimate(posterior: &MatrixNIWBelief) -> Result<(DMatrix<f64>, bool)> {
    let (inv, ridged) = linalg::spd_inverse_with_ridge(&posterior.sum_squares, 1e-10)
        .ok_or_else(|| Error::conditioning(None, "sum-of-squares matrix cannot be inverted"))?;
    if ridged {
        log::warn!("near-singular Wishart sum-of-squares matrix; ridge added");
    }
    let mut inv = inv;
    linalg::symmetrize(&mut inv);
    Ok((inv, ridged))
}
