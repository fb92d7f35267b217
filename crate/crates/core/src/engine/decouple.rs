//! Variational decoupling of the recoupled posterior and the entropy stress
//! metric.
//!
//! For each series the weighted sample is projected onto the normal/gamma
//! family by minimising `KL(p ‖ q)`, which reduces to matching
//! `E[λ θ]`, `E[λ]`, `E[log λ]` and `E[λ θ θ']`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::digamma;

use super::{chunked_sum, WeightedSample, REDUCE_CHUNK};
use crate::dlm::{BeliefRole, NormalGammaBelief};
use crate::error::{Error, Result};
use crate::linalg;

/// Relative ridge added to a singular `V` matrix.
const V_RIDGE: f64 = 1e-12;
/// Tolerance on `d - p` before a warning is raised.
const D_TOLERANCE: f64 = 1e-6;

/// Importance-weighted sufficient statistics of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct VbStats {
    pub weighted_mean_lambda: f64,
    pub weighted_mean_log_lambda: f64,
    pub weighted_mean_lambda_theta: DVector<f64>,
    pub v_matrix: DMatrix<f64>,
    pub d_stat: f64,
    /// Number of state coordinates with non-degenerate spread; coordinates
    /// that are constant across draws (fully phased-out coefficients) are
    /// excluded from `d_stat` and from the dimension in the dof equation.
    pub effective_dim: usize,
    pub dof: f64,
    /// The dof root-solve failed and the previous dof plus one was used.
    pub dof_fallback: bool,
    pub ridge_applied: bool,
}

/// Entropy stress metric: the Monte Carlo estimate of `KL(p ‖ q)` for the
/// fitted decoupled product `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entropy {
    /// Unclamped estimate.
    pub raw: f64,
    /// Reported value, clamped at zero; `+inf` when the weights are degenerate.
    pub value: f64,
    /// Effective sample size below two.
    pub degenerate: bool,
}

/// Result of [`vb_decouple`].
#[derive(Debug, Clone)]
pub struct Decoupled {
    pub beliefs: Vec<NormalGammaBelief>,
    pub stats: Vec<VbStats>,
    pub entropy: Entropy,
}

/// Solve for the normal/gamma dof `n` given `E[λ]`, `E[log λ]`, the state
/// dimension `p` and the statistic `d`:
///
/// `log(n + p - d) - ψ(n/2) - (p - d)/n - log(2 E[λ]) + E[log λ] = 0`.
///
/// Returns `None` when no sign change is found (for example when `λ` is
/// constant across draws and the root is at infinity).
pub fn solve_dof(mean_lambda: f64, mean_log_lambda: f64, p: f64, d: f64) -> Option<f64> {
    if !(mean_lambda > 0.0) || !mean_log_lambda.is_finite() {
        return None;
    }
    let k = p - d;
    let c = (2.0 * mean_lambda).ln() - mean_log_lambda;
    let h = |n: f64| (n + k).ln() - digamma(0.5 * n) - k / n - c;
    let base = (-k).max(0.0);

    let mut lo = None;
    let mut hi = None;
    // Beyond ~1e10 the residual falls below cancellation noise in
    // `log n - ψ(n/2)`, so a sign change there is not meaningful.
    let mut step = 1e-8;
    while step < 1e10 {
        let n = base + step;
        let v = h(n);
        if v.is_nan() {
            step *= 2.0;
            continue;
        }
        if lo.is_none() {
            if v > 0.0 {
                lo = Some(n);
            }
        } else if v < 0.0 {
            hi = Some(n);
            break;
        } else {
            lo = Some(n);
        }
        step *= 2.0;
    }
    let (mut lo, mut hi) = (lo?, hi?);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn decouple_series(
    j: usize,
    sample: &WeightedSample,
    fallback_dof: f64,
) -> Result<(NormalGammaBelief, VbStats)> {
    let w = sample.weights();
    let lambda = sample.precisions(j);
    let theta = sample.states(j);
    let p = theta.nrows();

    let e_lambda = chunked_sum(&w.iter().zip(lambda).map(|(w, l)| w * l).collect::<Vec<_>>());
    let e_log_lambda =
        chunked_sum(&w.iter().zip(lambda).map(|(w, l)| if *w > 0.0 { w * l.ln() } else { 0.0 }).collect::<Vec<_>>());
    if !(e_lambda > 0.0 && e_lambda.is_finite()) {
        return Err(Error::conditioning(Some(j), "weighted mean precision is not positive"));
    }

    let weighted_sum = |f: &(dyn Fn(usize) -> DMatrix<f64> + Sync), rows: usize, cols: usize| {
        let parts: Vec<DMatrix<f64>> = (0..sample.n_draws())
            .collect::<Vec<_>>()
            .par_chunks(REDUCE_CHUNK)
            .map(|rs| {
                let mut acc = DMatrix::zeros(rows, cols);
                for &r in rs {
                    if w[r] > 0.0 {
                        acc += f(r) * (w[r] * lambda[r]);
                    }
                }
                acc
            })
            .collect();
        parts.into_iter().fold(DMatrix::zeros(rows, cols), |a, b| a + b)
    };

    let e_lambda_theta: DVector<f64> =
        weighted_sum(&|r| DMatrix::from_column_slice(p, 1, theta.column(r).as_slice()), p, 1).column(0).into_owned();
    let mean = &e_lambda_theta / e_lambda;
    let mut v = weighted_sum(
        &|r| {
            let dev = theta.column(r) - &mean;
            &dev * dev.transpose()
        },
        p,
        p,
    );
    linalg::symmetrize(&mut v);

    // Coordinates that never move across draws carry no information; they
    // keep a zero row in the fitted scale matrix.
    let active: Vec<usize> = (0..p).filter(|&i| v[(i, i)] > 0.0).collect();
    let pa = active.len();
    let v_active = DMatrix::from_fn(pa, pa, |a, b| v[(active[a], active[b])]);
    let (v_inv, ridge_applied) = if pa == 0 {
        (DMatrix::zeros(0, 0), false)
    } else {
        match linalg::spd_inverse_with_ridge(&v_active, 0.0) {
            Some((inv, _)) => (inv, false),
            None => {
                let (inv, _) = linalg::spd_inverse_with_ridge(&v_active, V_RIDGE * pa as f64)
                    .ok_or_else(|| Error::conditioning(Some(j), "V matrix cannot be inverted"))?;
                log::warn!("series {j}: singular V matrix, ridge applied");
                (inv, true)
            }
        }
    };
    let d_terms: Vec<f64> = (0..sample.n_draws())
        .map(|r| {
            if w[r] == 0.0 {
                return 0.0;
            }
            let dev = DVector::from_fn(pa, |a, _| theta[(active[a], r)] - mean[active[a]]);
            w[r] * lambda[r] * dev.dot(&(&v_inv * &dev))
        })
        .collect();
    let d = chunked_sum(&d_terms);
    if d > pa as f64 + D_TOLERANCE {
        log::warn!("series {j}: d = {d} exceeds the state dimension {pa}");
    }

    let (dof, dof_fallback) = match solve_dof(e_lambda, e_log_lambda, pa as f64, d) {
        Some(n) => (n, false),
        None => {
            log::warn!("series {j}: dof root-solve failed, using {fallback_dof}");
            (fallback_dof, true)
        }
    };
    let s = (dof + pa as f64 - d) / (dof * e_lambda);
    let mut scale = DMatrix::zeros(p, p);
    for (a, &ia) in active.iter().enumerate() {
        for (b, &ib) in active.iter().enumerate() {
            scale[(ia, ib)] = s * v_active[(a, b)];
        }
    }
    let belief = NormalGammaBelief {
        mean,
        scale,
        dof,
        precision_scale: s,
        role: BeliefRole::Posterior,
    };
    belief.validate(Some(j))?;
    Ok((
        belief,
        VbStats {
            weighted_mean_lambda: e_lambda,
            weighted_mean_log_lambda: e_log_lambda,
            weighted_mean_lambda_theta: e_lambda_theta,
            v_matrix: v,
            d_stat: d,
            effective_dim: pa,
            dof,
            dof_fallback,
            ridge_applied,
        },
    ))
}

/// Decouple a weighted joint posterior sample into independent
/// normal/gamma posteriors and compute the entropy metric.
///
/// `updated` are the per-series normal/gamma posteriors the sample was drawn
/// from. They enter the entropy estimate and provide the fallback dof.
pub fn vb_decouple(sample: &WeightedSample, updated: &[NormalGammaBelief]) -> Result<Decoupled> {
    if updated.len() != sample.n_series() {
        return Err(Error::Structure("sample and beliefs disagree on the series count".into()));
    }
    let fitted: Result<Vec<_>> = (0..sample.n_series())
        .into_par_iter()
        .map(|j| decouple_series(j, sample, updated[j].dof))
        .collect();
    let (beliefs, stats): (Vec<_>, Vec<_>) = fitted?.into_iter().unzip();
    let entropy = entropy_metric(sample, updated, &beliefs)?;
    Ok(Decoupled {
        beliefs,
        stats,
        entropy,
    })
}

/// Monte Carlo estimate of `KL(p ‖ q)`:
///
/// `E_w[log(w / Ẑ)] + E_w[log p̃(θ, λ) - log q(θ, λ)]`
///
/// where `w = |det(I - Γ)|`, `Ẑ` is its sample mean, `p̃` the product of
/// updated normal/gammas the draws came from and `q` the decoupled product.
pub fn entropy_metric(
    sample: &WeightedSample,
    updated: &[NormalGammaBelief],
    decoupled: &[NormalGammaBelief],
) -> Result<Entropy> {
    if sample.ess() < 2.0 {
        return Ok(Entropy {
            raw: f64::INFINITY,
            value: f64::INFINITY,
            degenerate: true,
        });
    }
    let n = sample.n_draws() as f64;
    let w = sample.weights();
    let terms: Result<Vec<f64>> = (0..sample.n_draws())
        .into_par_iter()
        .map(|r| {
            if w[r] == 0.0 {
                return Ok(0.0);
            }
            let mut log_ratio = 0.0;
            for j in 0..sample.n_series() {
                let theta = sample.states(j).column(r).into_owned();
                let lambda = sample.precisions(j)[r];
                let lp = updated[j].ln_density(&theta, lambda);
                let lq = decoupled[j].ln_density(&theta, lambda);
                match (lp, lq) {
                    (Some(lp), Some(lq)) => log_ratio += lp - lq,
                    _ => {
                        return Err(Error::conditioning(
                            Some(j),
                            "normal/gamma density undefined for entropy metric",
                        ))
                    }
                }
            }
            Ok(w[r] * ((w[r] * n).ln() + log_ratio))
        })
        .collect();
    let raw = chunked_sum(&terms?);
    if raw < 0.0 {
        log::debug!("entropy estimate {raw} clamped to zero");
    }
    Ok(Entropy {
        raw,
        value: raw.max(0.0),
        degenerate: false,
    })
}
