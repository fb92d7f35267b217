//! Importance recoupling of the per-series posteriors.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{build_gamma_matrix, sample_normal_gamma, WeightedSample};
use crate::dlm::{BeliefRole, NormalGammaBelief, StatePartition};
use crate::error::{Error, Result};
use crate::rng::Stage;

/// Diagnostics of one recoupling step.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoupleDiagnostics {
    pub ess: f64,
    /// ESS below which the step is flagged (a stress signal, not a failure).
    pub ess_floor: f64,
    pub below_floor: bool,
    /// Whether `det(I - Γ)` changed sign across draws.
    pub sign_varies: bool,
    /// Draws whose `I - Γ` was numerically singular (zero weight).
    pub n_singular: usize,
}

/// Sample from the product of updated normal/gammas and weight each draw by
/// `|det(I - Γ)|`.
///
/// `updated` are the per-series posteriors obtained by [`crate::dlm::update`]
/// with regressors that include the realised parent values. `ess_floor`
/// defaults to `R / 100` when `None`.
pub fn recouple(
    updated: &[NormalGammaBelief],
    partitions: &[StatePartition],
    n_draws: usize,
    seed: u64,
    time: u64,
    ess_floor: Option<f64>,
) -> Result<(WeightedSample, RecoupleDiagnostics)> {
    if updated.iter().any(|b| b.role != BeliefRole::Posterior) {
        return Err(Error::Contract("recouple expects updated posterior beliefs".into()));
    }
    if updated.len() != partitions.len() {
        return Err(Error::Structure("beliefs and partitions disagree on the series count".into()));
    }
    let mut sample = sample_normal_gamma(updated, n_draws, seed, Stage::Posterior, time)?;
    let m = partitions.len();
    let dets: Result<Vec<Option<(f64, f64)>>> = (0..n_draws)
        .into_par_iter()
        .map(|r| {
            let gamma = build_gamma_matrix(&sample, r, partitions)?;
            Ok(crate::linalg::log_abs_det(&(DMatrix::identity(m, m) - gamma)))
        })
        .collect();
    let dets = dets?;
    let n_singular = dets.iter().filter(|d| d.is_none()).count();
    let mut signs = dets.iter().flatten().map(|&(_, s)| s);
    let first = signs.next();
    let sign_varies = first.is_some_and(|f| signs.any(|s| s != f));
    if sign_varies {
        log::warn!("sign of det(I - Gamma) varies across draws at time {time}");
    }
    let log_weights = dets
        .iter()
        .map(|d| d.map_or(f64::NEG_INFINITY, |(ld, _)| ld))
        .collect();
    sample.set_log_weights(log_weights)?;

    let ess = sample.ess();
    let ess_floor = ess_floor.unwrap_or(n_draws as f64 / 100.0);
    let below_floor = ess < ess_floor;
    if below_floor {
        log::warn!("effective sample size {ess:.1} below floor {ess_floor:.1} at time {time}");
    }
    Ok((
        sample,
        RecoupleDiagnostics {
            ess,
            ess_floor,
            below_floor,
            sign_varies,
            n_singular,
        },
    ))
}
