//! Forward-filtering selection of simultaneous parental sets.
//!
//! Each series keeps three disjoint groups of parents: a `core` set that
//! defines the current sparsity of `Γ`, a `warm_up` set of candidates that
//! are learned for `Δt` steps before promotion, and a `phase_out` set of
//! retired parents whose coefficients are shrunk to zero over `Δt` steps.
//! Candidates come from the largest absolute off-diagonal entries of the
//! precision matrix estimated by the Wishart benchmark model.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::dlm::{NormalGammaBelief, StatePartition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    /// Target size of the core set.
    pub core_target: usize,
    /// Warm-up and phase-out span `Δt`; also the capacity of the warm-up set.
    pub warmup_span: usize,
    /// Number of largest precision entries considered per row.
    pub n_max: usize,
    /// Prior scale entry for a newly admitted coefficient.
    pub new_parent_prior_var: f64,
    /// Series allowed to act as parents; `None` means all.
    pub eligible: Option<BTreeSet<usize>>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            core_target: 20,
            warmup_span: 10,
            n_max: 10,
            new_parent_prior_var: 1e-4,
            eligible: None,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.core_target == 0 || self.warmup_span == 0 || self.n_max == 0 {
            return Err(Error::Config(
                "selection counts (core_target, warmup_span, n_max) must be at least 1".into(),
            ));
        }
        if !(self.new_parent_prior_var > 0.0 && self.new_parent_prior_var.is_finite()) {
            return Err(Error::Config("selection.new_parent_prior_var must be positive".into()));
        }
        Ok(())
    }
}

/// Parental sets of one series. Ages count filter steps since admission
/// (warm-up) or demotion (phase-out).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParentalSets {
    owner: usize,
    pub core: BTreeSet<usize>,
    pub warm_up: BTreeMap<usize, usize>,
    pub phase_out: BTreeMap<usize, usize>,
}

/// Membership changes made by one [`review`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReviewEvents {
    pub promoted: Vec<usize>,
    pub demoted: Vec<usize>,
    pub removed: Vec<usize>,
}

/// Lifecycle stage of a parent, as written to the membership log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Membership {
    WarmUp,
    Core,
    PhaseOut,
}

impl Membership {
    pub fn label(self) -> &'static str {
        match self {
            Membership::WarmUp => "warmup",
            Membership::Core => "core",
            Membership::PhaseOut => "phaseout",
        }
    }
}

impl ParentalSets {
    pub fn new(owner: usize) -> Self {
        ParentalSets {
            owner,
            core: BTreeSet::new(),
            warm_up: BTreeMap::new(),
            phase_out: BTreeMap::new(),
        }
    }

    /// Sets with a given initial core.
    pub fn with_core(owner: usize, core: impl IntoIterator<Item = usize>) -> Result<Self> {
        let sets = ParentalSets {
            owner,
            core: core.into_iter().collect(),
            warm_up: BTreeMap::new(),
            phase_out: BTreeMap::new(),
        };
        if sets.core.contains(&owner) {
            return Err(Error::Structure(format!("series {owner} cannot be its own parent")));
        }
        Ok(sets)
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    /// All parents in ascending series order (the state layout).
    pub fn all_parents(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .core
            .iter()
            .chain(self.warm_up.keys())
            .chain(self.phase_out.keys())
            .copied()
            .collect();
        all.sort_unstable();
        all
    }

    pub fn membership(&self) -> Vec<(usize, Membership)> {
        let mut out: Vec<(usize, Membership)> = self
            .core
            .iter()
            .map(|&k| (k, Membership::Core))
            .chain(self.warm_up.keys().map(|&k| (k, Membership::WarmUp)))
            .chain(self.phase_out.keys().map(|&k| (k, Membership::PhaseOut)))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn contains(&self, k: usize) -> bool {
        self.core.contains(&k) || self.warm_up.contains_key(&k) || self.phase_out.contains_key(&k)
    }

    /// Advance the warm-up and phase-out clocks by one step.
    pub fn increment_ages(&mut self) {
        for age in self.warm_up.values_mut().chain(self.phase_out.values_mut()) {
            *age += 1;
        }
    }

    /// Partition matching these sets.
    pub fn partition(&self, n_phi: usize) -> Result<StatePartition> {
        StatePartition::new(self.owner, n_phi, self.all_parents())
    }

    /// Transition diagonal for the next evolution: 1 everywhere except for
    /// phase-out coefficients, which are scaled by [`phase_out_scale`] at
    /// `l = age + 1`.
    pub fn transition_diag(&self, partition: &StatePartition, span: usize) -> Result<DVector<f64>> {
        let mut g = DVector::from_element(partition.dim(), 1.0);
        for (&k, &age) in &self.phase_out {
            let pos = partition.position_of(k).ok_or_else(|| {
                Error::Structure(format!("series {}: phase-out parent {k} missing from state", self.owner))
            })?;
            g[pos] = phase_out_scale(age + 1, span)?;
        }
        Ok(g)
    }

    /// Check disjointness, self-exclusion, age bounds and warm-up capacity.
    pub fn check_invariants(&self, cfg: &SelectionConfig) -> Result<()> {
        let j = self.owner;
        if self.contains(j) {
            return Err(Error::Contract(format!("series {j} is in its own parental sets")));
        }
        for k in self.warm_up.keys() {
            if self.core.contains(k) || self.phase_out.contains_key(k) {
                return Err(Error::Contract(format!("series {j}: parent {k} in two sets")));
            }
        }
        for k in self.phase_out.keys() {
            if self.core.contains(k) {
                return Err(Error::Contract(format!("series {j}: parent {k} in two sets")));
            }
        }
        if self.warm_up.values().chain(self.phase_out.values()).any(|&a| a > cfg.warmup_span) {
            return Err(Error::Contract(format!("series {j}: age beyond the warm-up span")));
        }
        if self.warm_up.len() > cfg.warmup_span {
            return Err(Error::Contract(format!("series {j}: warm-up set over capacity")));
        }
        Ok(())
    }
}

/// Top-`n_max` entries of a precision row by absolute value (ties to the
/// lower index), excluding the owner, ineligible series and zero entries,
/// filtered to series not already warming up, in the core or phasing out.
pub fn propose_candidates(precision_row: &[f64], sets: &ParentalSets, cfg: &SelectionConfig) -> Vec<usize> {
    let j = sets.owner();
    let mut ranked: Vec<(usize, f64)> = precision_row
        .iter()
        .enumerate()
        .filter(|&(k, v)| k != j && *v != 0.0 && v.is_finite())
        .filter(|(k, _)| cfg.eligible.as_ref().is_none_or(|e| e.contains(k)))
        .map(|(k, v)| (k, v.abs()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(cfg.n_max)
        .map(|(k, _)| k)
        .filter(|&k| !sets.contains(k))
        .collect()
}

/// Admit candidates (in the given order) into free warm-up slots with age 0.
/// Candidates beyond the free capacity are deferred. Returns the admitted ids.
pub fn admit(sets: &mut ParentalSets, candidates: &[usize], cfg: &SelectionConfig) -> Vec<usize> {
    let free = cfg.warmup_span.saturating_sub(sets.warm_up.len());
    let admitted: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&k| k != sets.owner() && !sets.contains(k))
        .take(free)
        .collect();
    for &k in &admitted {
        sets.warm_up.insert(k, 0);
    }
    admitted
}

/// Signal-to-noise ratios `|a_k| / R_kk` of the parental coefficients, in
/// partition order.
pub fn snr(belief: &NormalGammaBelief, partition: &StatePartition) -> Result<Vec<f64>> {
    if belief.dim() != partition.dim() {
        return Err(Error::Structure(format!(
            "series {}: belief has {} states, partition {}",
            partition.owner(),
            belief.dim(),
            partition.dim()
        )));
    }
    (partition.n_phi()..partition.dim())
        .map(|i| {
            let r = belief.scale[(i, i)];
            if r > 0.0 {
                Ok(belief.mean[i].abs() / r)
            } else if belief.mean[i] == 0.0 {
                // Fully shrunk phase-out coefficient.
                Ok(0.0)
            } else {
                Err(Error::conditioning(
                    Some(partition.owner()),
                    format!("non-positive scale entry {r} for a parental coefficient"),
                ))
            }
        })
        .collect()
}

/// SNR keyed by parent id.
pub fn snr_by_parent(belief: &NormalGammaBelief, partition: &StatePartition) -> Result<BTreeMap<usize, f64>> {
    Ok(partition.parents().iter().copied().zip(snr(belief, partition)?).collect())
}

/// Promote mature warm-up parents, demote the lowest-SNR core parents while
/// the core exceeds its target, and drop phase-out parents whose span has
/// elapsed. Ages must already be incremented for this step.
pub fn review(
    sets: &ParentalSets,
    snr_values: &BTreeMap<usize, f64>,
    cfg: &SelectionConfig,
) -> Result<(ParentalSets, ReviewEvents)> {
    let mut next = sets.clone();
    let mut events = ReviewEvents::default();

    let mature: Vec<usize> = next
        .warm_up
        .iter()
        .filter(|&(_, &age)| age >= cfg.warmup_span)
        .map(|(&k, _)| k)
        .collect();
    for k in mature {
        next.warm_up.remove(&k);
        next.core.insert(k);
        events.promoted.push(k);
    }

    while next.core.len() > cfg.core_target {
        let mut worst: Option<(usize, f64)> = None;
        for &k in &next.core {
            let v = *snr_values.get(&k).ok_or_else(|| {
                Error::Structure(format!("series {}: no SNR for core parent {k}", sets.owner()))
            })?;
            // Ascending iteration makes the lowest index win ties.
            if worst.is_none_or(|(_, w)| v < w) {
                worst = Some((k, v));
            }
        }
        let (k, _) = worst.expect("core set is non-empty");
        next.core.remove(&k);
        next.phase_out.insert(k, 0);
        events.demoted.push(k);
    }

    let expired: Vec<usize> = next
        .phase_out
        .iter()
        .filter(|&(_, &age)| age >= cfg.warmup_span)
        .map(|(&k, _)| k)
        .collect();
    for k in expired {
        next.phase_out.remove(&k);
        events.removed.push(k);
    }
    Ok((next, events))
}

/// Phase-out shrinkage factor `1 - 1 / ((Δt + 1) - l)` for step `l` of the
/// phase-out period, `1 ≤ l ≤ Δt`.
pub fn phase_out_scale(step: usize, span: usize) -> Result<f64> {
    if step == 0 || step > span {
        return Err(Error::Contract(format!("phase-out step {step} outside 1..={span}")));
    }
    Ok(1.0 - 1.0 / ((span + 1 - step) as f64))
}

/// Re-lay a belief onto a new partition: retained coordinates keep their
/// joint distribution (marginalising dropped parents), new parents get mean
/// zero, scale `cfg.new_parent_prior_var` and zero cross-scale.
pub fn restructure_belief(
    belief: &NormalGammaBelief,
    old: &StatePartition,
    new: &StatePartition,
    cfg: &SelectionConfig,
) -> Result<NormalGammaBelief> {
    if old.owner() != new.owner() || old.n_phi() != new.n_phi() || belief.dim() != old.dim() {
        return Err(Error::Structure(format!(
            "series {}: partition/belief dimensions do not line up for restructuring",
            old.owner()
        )));
    }
    let p = new.dim();
    let source: Vec<Option<usize>> = (0..p)
        .map(|i| {
            if i < new.n_phi() {
                Some(i)
            } else {
                old.position_of(new.parents()[i - new.n_phi()])
            }
        })
        .collect();
    let mean = DVector::from_fn(p, |i, _| source[i].map_or(0.0, |s| belief.mean[s]));
    let scale = DMatrix::from_fn(p, p, |i, k| match (source[i], source[k]) {
        (Some(a), Some(b)) => belief.scale[(a, b)],
        (None, None) if i == k => cfg.new_parent_prior_var,
        _ => 0.0,
    });
    Ok(NormalGammaBelief {
        mean,
        scale,
        dof: belief.dof,
        precision_scale: belief.precision_scale,
        role: belief.role,
    })
}

/// Fraction of series whose core set differs between two snapshots.
pub fn core_churn(before: &[ParentalSets], after: &[ParentalSets]) -> f64 {
    if before.is_empty() {
        return 0.0;
    }
    let changed = before.iter().zip(after).filter(|(a, b)| a.core != b.core).count();
    changed as f64 / before.len() as f64
}
