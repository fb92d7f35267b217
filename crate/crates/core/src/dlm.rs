//! Univariate normal/gamma DLM recursions.
//!
//! Each series carries a [`NormalGammaBelief`] over its state vector `θ` and
//! observation precision `λ`:
//!
//! ```text
//! θ | λ ~ N(mean, scale / (precision_scale · λ))
//! λ     ~ Gamma(dof / 2, dof · precision_scale / 2)
//! ```
//!
//! The state is split into an external-predictor block `φ` followed by a block
//! `γ` of simultaneous parental coefficients (see [`StatePartition`]).
//! [`evolve`] moves a posterior to the next prior with block discounting and
//! gamma/beta volatility discounting; [`update`] is the closed-form one-step
//! conjugate update.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative tolerance for the PSD checks on scale matrices.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeliefRole {
    Prior,
    Posterior,
}

/// Conjugate normal/gamma belief for one series.
///
/// As a prior the fields hold `(a, R, r, s_{t-1})`; as a posterior they hold
/// `(m, C, n, s_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalGammaBelief {
    pub mean: DVector<f64>,
    pub scale: DMatrix<f64>,
    pub dof: f64,
    pub precision_scale: f64,
    pub role: BeliefRole,
}

impl NormalGammaBelief {
    pub fn new(
        mean: DVector<f64>,
        scale: DMatrix<f64>,
        dof: f64,
        precision_scale: f64,
        role: BeliefRole,
    ) -> Result<Self> {
        let belief = NormalGammaBelief {
            mean,
            scale,
            dof,
            precision_scale,
            role,
        };
        belief.validate(None)?;
        Ok(belief)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Check shape, positivity and positive semi-definiteness.
    pub fn validate(&self, series: Option<usize>) -> Result<()> {
        let p = self.mean.len();
        if self.scale.nrows() != p || self.scale.ncols() != p {
            return Err(Error::Structure(format!(
                "scale matrix is {}x{} but the state has {p} entries",
                self.scale.nrows(),
                self.scale.ncols()
            )));
        }
        if !(self.dof > 0.0 && self.dof.is_finite()) {
            return Err(Error::conditioning(series, format!("dof {} is not positive", self.dof)));
        }
        if !(self.precision_scale > 0.0 && self.precision_scale.is_finite()) {
            return Err(Error::conditioning(
                series,
                format!("precision scale {} is not positive", self.precision_scale),
            ));
        }
        if self.mean.iter().chain(self.scale.iter()).any(|v| !v.is_finite()) {
            return Err(Error::conditioning(series, "non-finite belief entries"));
        }
        if linalg::psd_factor(&self.scale, PSD_TOL).is_none() {
            return Err(Error::conditioning(series, "scale matrix is not positive semi-definite"));
        }
        Ok(())
    }

    /// Mean of the gamma marginal of `λ`.
    pub fn mean_precision(&self) -> f64 {
        1.0 / self.precision_scale
    }

    /// Log density of `(θ, λ)` under this belief.
    ///
    /// Coordinates with a zero scale diagonal are point masses at their mean
    /// and are left out, so the density is taken on the non-degenerate
    /// subspace. `None` if the remaining scale block is singular.
    pub fn ln_density(&self, theta: &DVector<f64>, lambda: f64) -> Option<f64> {
        use statrs::function::gamma::ln_gamma;
        let active: Vec<usize> = (0..self.dim()).filter(|&i| self.scale[(i, i)] > 0.0).collect();
        let pa = active.len();
        let diff = DVector::from_fn(pa, |a, _| theta[active[a]] - self.mean[active[a]]);
        let block = DMatrix::from_fn(pa, pa, |a, b| self.scale[(active[a], active[b])]);
        let (quad, logdet) = if pa == 0 {
            (0.0, 0.0)
        } else {
            linalg::spd_quad_logdet(&block, &diff)?
        };
        let p = pa as f64;
        let sl = self.precision_scale * lambda;
        let ln_normal = -0.5 * p * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet
            + 0.5 * p * sl.ln()
            - 0.5 * sl * quad;
        let shape = 0.5 * self.dof;
        let rate = 0.5 * self.dof * self.precision_scale;
        let ln_gamma_pdf =
            shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * lambda.ln() - rate * lambda;
        Some(ln_normal + ln_gamma_pdf)
    }
}

/// Layout of one series' state vector: `n_phi` external predictor
/// coefficients followed by one coefficient per simultaneous parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatePartition {
    owner: usize,
    n_phi: usize,
    parents: Vec<usize>,
}

impl StatePartition {
    pub fn new(owner: usize, n_phi: usize, parents: Vec<usize>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for &k in &parents {
            if k == owner {
                return Err(Error::Structure(format!("series {owner} lists itself as a parent")));
            }
            if !seen.insert(k) {
                return Err(Error::Structure(format!(
                    "series {owner} lists parent {k} more than once"
                )));
            }
        }
        Ok(StatePartition {
            owner,
            n_phi,
            parents,
        })
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn n_phi(&self) -> usize {
        self.n_phi
    }

    pub fn n_gamma(&self) -> usize {
        self.parents.len()
    }

    pub fn dim(&self) -> usize {
        self.n_phi + self.parents.len()
    }

    /// Parent series ids in state order.
    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    /// State index of parent `k`, if present.
    pub fn position_of(&self, parent: usize) -> Option<usize> {
        self.parents.iter().position(|&k| k == parent).map(|i| self.n_phi + i)
    }
}

/// Discount specification for [`evolve`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionSpec {
    pub delta_phi: f64,
    pub delta_gamma: f64,
    pub beta: f64,
    /// Diagonal of the transition matrix `G`; `None` means the identity.
    pub transition_diag: Option<DVector<f64>>,
}

impl EvolutionSpec {
    pub fn new(delta_phi: f64, delta_gamma: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("delta_phi", delta_phi), ("delta_gamma", delta_gamma), ("beta", beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} = {v} is outside (0, 1]")));
            }
        }
        Ok(EvolutionSpec {
            delta_phi,
            delta_gamma,
            beta,
            transition_diag: None,
        })
    }

    pub fn with_transition(mut self, diag: DVector<f64>) -> Self {
        self.transition_diag = Some(diag);
        self
    }
}

/// By-products of a one-step update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub forecast_error: f64,
    pub forecast_var: f64,
    pub adaptive_vector: DVector<f64>,
    pub vol_update: f64,
    /// Whether the posterior scale matrix needed eigenvalue clamping.
    pub psd_repaired: bool,
}

/// Evolve a posterior at `t` into the prior for `t + 1`.
pub fn evolve(
    posterior: &NormalGammaBelief,
    spec: &EvolutionSpec,
    partition: &StatePartition,
) -> Result<NormalGammaBelief> {
    let series = Some(partition.owner());
    let p = posterior.dim();
    if posterior.role != BeliefRole::Posterior {
        return Err(Error::Contract("evolve expects a posterior belief".into()));
    }
    if partition.dim() != p {
        return Err(Error::Structure(format!(
            "series {}: partition has {} states but belief has {p}",
            partition.owner(),
            partition.dim()
        )));
    }
    let g = match &spec.transition_diag {
        Some(d) if d.len() != p => {
            return Err(Error::Structure(format!(
                "series {}: transition diagonal has length {} (expected {p})",
                partition.owner(),
                d.len()
            )))
        }
        Some(d) => d.clone(),
        None => DVector::from_element(p, 1.0),
    };

    let mean = posterior.mean.component_mul(&g);
    // B = G C G' for diagonal G, followed by block discounting
    // R_ik = B_ik / sqrt(δ_i δ_k).
    let inv_sqrt_delta: Vec<f64> = (0..p)
        .map(|i| {
            let d = if i < partition.n_phi() { spec.delta_phi } else { spec.delta_gamma };
            1.0 / d.sqrt()
        })
        .collect();
    let mut scale = DMatrix::zeros(p, p);
    for i in 0..p {
        for k in 0..p {
            scale[(i, k)] = g[i] * posterior.scale[(i, k)] * g[k] * inv_sqrt_delta[i] * inv_sqrt_delta[k];
        }
    }
    linalg::symmetrize(&mut scale);
    if linalg::psd_factor(&scale, PSD_TOL).is_none() {
        return Err(Error::conditioning(series, "evolved scale matrix is not positive semi-definite"));
    }
    Ok(NormalGammaBelief {
        mean,
        scale,
        dof: spec.beta * posterior.dof,
        precision_scale: posterior.precision_scale,
        role: BeliefRole::Prior,
    })
}

/// One-step conjugate update of a prior with regressor `F` and observation `y`.
pub fn update(
    prior: &NormalGammaBelief,
    regressor: &DVector<f64>,
    observation: f64,
) -> Result<(NormalGammaBelief, UpdateStats)> {
    if prior.role != BeliefRole::Prior {
        return Err(Error::Contract("update expects a prior belief".into()));
    }
    if regressor.len() != prior.dim() {
        return Err(Error::Structure(format!(
            "regressor has length {} but the state has {} entries",
            regressor.len(),
            prior.dim()
        )));
    }
    let rf = &prior.scale * regressor;
    let f = regressor.dot(&prior.mean);
    let e = observation - f;
    let q = prior.precision_scale + regressor.dot(&rf);
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::Numerical(format!(
            "forecast variance factor q = {q} is not positive; prior scale matrix is corrupt"
        )));
    }
    let a = rf / q;
    let r = prior.dof;
    let z = (r + e * e / q) / (r + 1.0);
    let mean = &prior.mean + &a * e;
    let mut scale = (&prior.scale - &a * a.transpose() * q) * z;
    linalg::symmetrize(&mut scale);
    let repaired = linalg::repair_psd(&mut scale, PSD_TOL);
    if repaired {
        log::warn!("posterior scale matrix lost positive semi-definiteness; clamped");
    }
    let posterior = NormalGammaBelief {
        mean,
        scale,
        dof: r + 1.0,
        precision_scale: z * prior.precision_scale,
        role: BeliefRole::Posterior,
    };
    Ok((
        posterior,
        UpdateStats {
            forecast_error: e,
            forecast_var: q,
            adaptive_vector: a,
            vol_update: z,
            psd_repaired: repaired,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar(mean: f64, scale: f64, dof: f64, s: f64, role: BeliefRole) -> NormalGammaBelief {
        NormalGammaBelief::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, scale),
            dof,
            s,
            role,
        )
        .unwrap()
    }

    #[test]
    fn evolve_without_discount_is_identity() {
        let post = NormalGammaBelief::new(
            DVector::from_vec(vec![0.1, -0.2]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            7.0,
            0.5,
            BeliefRole::Posterior,
        )
        .unwrap();
        let part = StatePartition::new(0, 1, vec![1]).unwrap();
        let prior = evolve(&post, &EvolutionSpec::new(1.0, 1.0, 1.0).unwrap(), &part).unwrap();
        assert_eq!(prior.mean, post.mean);
        assert_eq!(prior.scale, post.scale);
        assert_eq!(prior.dof, post.dof);
        assert_eq!(prior.precision_scale, post.precision_scale);
        assert_eq!(prior.role, BeliefRole::Prior);
    }

    #[test]
    fn scalar_discount() {
        let post = scalar(0.0, 2.0, 5.0, 1.0, BeliefRole::Posterior);
        let part = StatePartition::new(0, 1, vec![]).unwrap();
        let prior = evolve(&post, &EvolutionSpec::new(0.5, 1.0, 1.0).unwrap(), &part).unwrap();
        assert_abs_diff_eq!(prior.scale[(0, 0)], 4.0, epsilon = 1e-15);
    }

    #[test]
    fn block_discount_matches_reference_matrix() {
        let post = NormalGammaBelief::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            5.0,
            1.0,
            BeliefRole::Posterior,
        )
        .unwrap();
        let part = StatePartition::new(0, 1, vec![3]).unwrap();
        let prior = evolve(&post, &EvolutionSpec::new(0.995, 0.999, 1.0).unwrap(), &part).unwrap();
        // Reference: W = blockwise B (1/δ - 1) and R = B + W.
        let b = DMatrix::<f64>::identity(2, 2);
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 0)] = b[(0, 0)] * (1.0 / 0.995 - 1.0);
        w[(1, 1)] = b[(1, 1)] * (1.0 / 0.999 - 1.0);
        let reference = &b + &w;
        assert!((&prior.scale - &reference).abs().max() < 1e-15);
        assert_eq!(prior.scale[(0, 1)], 0.0);
    }

    #[test]
    fn cross_block_uses_geometric_mean_discount() {
        let post = NormalGammaBelief::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
            5.0,
            1.0,
            BeliefRole::Posterior,
        )
        .unwrap();
        let part = StatePartition::new(0, 1, vec![1]).unwrap();
        let prior = evolve(&post, &EvolutionSpec::new(0.9, 0.8, 1.0).unwrap(), &part).unwrap();
        assert_abs_diff_eq!(prior.scale[(0, 1)], 0.5 / (0.9_f64 * 0.8).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn unit_standardized_error_keeps_volatility() {
        // s + F'RF = q = 1 and e = 1 with r = 9 gives z = 1.
        let prior = scalar(0.0, 0.5, 9.0, 0.5, BeliefRole::Prior);
        let (post, stats) = update(&prior, &DVector::from_element(1, 1.0), 1.0).unwrap();
        assert_abs_diff_eq!(stats.forecast_var, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.vol_update, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(post.precision_scale, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn hand_evaluated_update() {
        let prior = scalar(0.0, 1.0, 4.0, 1.0, BeliefRole::Prior);
        let (post, stats) = update(&prior, &DVector::from_element(1, 1.0), 0.0).unwrap();
        assert_eq!(stats.forecast_error, 0.0);
        assert_abs_diff_eq!(stats.forecast_var, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.adaptive_vector[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.vol_update, 0.8, epsilon = 1e-15);
        assert_eq!(post.mean[0], 0.0);
        assert_abs_diff_eq!(post.scale[(0, 0)], 0.4, epsilon = 1e-15);
        assert_eq!(post.dof, 5.0);
        assert_abs_diff_eq!(post.precision_scale, 0.8, epsilon = 1e-15);
    }

    #[test]
    fn dof_converges_to_discount_fixed_point() {
        let spec = EvolutionSpec::new(1.0, 1.0, 0.95).unwrap();
        let part = StatePartition::new(0, 1, vec![]).unwrap();
        let mut post = scalar(0.0, 1.0, 5.0, 1.0, BeliefRole::Posterior);
        for _ in 0..1000 {
            let prior = evolve(&post, &spec, &part).unwrap();
            post = update(&prior, &DVector::from_element(1, 1.0), 0.1).unwrap().0;
        }
        assert_abs_diff_eq!(post.dof, 20.0, epsilon = 1e-6);
    }

    #[test]
    fn identity_evolution_commutes_with_update() {
        let post = NormalGammaBelief::new(
            DVector::from_vec(vec![0.2, 0.1]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            6.0,
            0.3,
            BeliefRole::Posterior,
        )
        .unwrap();
        let part = StatePartition::new(0, 1, vec![2]).unwrap();
        let prior = evolve(&post, &EvolutionSpec::new(1.0, 1.0, 1.0).unwrap(), &part).unwrap();
        let f = DVector::from_vec(vec![1.0, -0.4]);
        let (a, _) = update(&prior, &f, 0.7).unwrap();
        let mut as_prior = post.clone();
        as_prior.role = BeliefRole::Prior;
        let (b, _) = update(&as_prior, &f, 0.7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_roles_and_partitions() {
        let prior = scalar(0.0, 1.0, 4.0, 1.0, BeliefRole::Prior);
        let part = StatePartition::new(0, 1, vec![]).unwrap();
        let spec = EvolutionSpec::new(1.0, 1.0, 1.0).unwrap();
        assert!(matches!(evolve(&prior, &spec, &part), Err(Error::Contract(_))));
        let post = scalar(0.0, 1.0, 4.0, 1.0, BeliefRole::Posterior);
        assert!(update(&post, &DVector::from_element(1, 1.0), 0.0).is_err());
        assert!(StatePartition::new(2, 1, vec![2]).is_err());
        assert!(StatePartition::new(2, 1, vec![1, 1]).is_err());
        assert!(EvolutionSpec::new(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn corrupt_prior_is_fatal() {
        let prior = NormalGammaBelief {
            mean: DVector::zeros(1),
            scale: DMatrix::from_element(1, 1, -2.0),
            dof: 4.0,
            precision_scale: 1.0,
            role: BeliefRole::Prior,
        };
        assert!(matches!(
            update(&prior, &DVector::from_element(1, 1.0), 0.0),
            Err(Error::Numerical(_))
        ));
    }

    fn random_psd(p: usize, entries: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_iterator(p, p, entries.iter().copied());
        &a * a.transpose()
    }

    proptest! {
        #[test]
        fn posterior_scale_stays_psd(
            entries in prop::collection::vec(-1.0f64..1.0, 9),
            f in prop::collection::vec(-2.0f64..2.0, 3),
            y in -3.0f64..3.0,
            dof in 0.5f64..50.0,
            s in 0.01f64..2.0,
        ) {
            let prior = NormalGammaBelief::new(
                DVector::zeros(3), random_psd(3, &entries), dof, s, BeliefRole::Prior).unwrap();
            let (post, stats) = update(&prior, &DVector::from_vec(f), y).unwrap();
            prop_assert!(stats.forecast_var >= s);
            prop_assert!(stats.vol_update > 0.0);
            prop_assert_eq!(post.scale.clone(), post.scale.transpose());
            let trace = post.scale.trace();
            prop_assert!(linalg::min_eigenvalue(&post.scale) >= -1e-10 * trace.max(1e-300));
        }
    }
}
