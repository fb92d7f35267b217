//! The daily filter and trading loop.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::config::{ModelConfig, ModelKind, Rule, StrategySpec};
use super::data::{PanelView, ReturnsPanel};
use super::ledger::{metrics, BacktestLedger, DayRecord, RunDiagnostics, SelectionDay, StrategyDay};
use crate::dlm::{self, BeliefRole, EvolutionSpec, NormalGammaBelief, StatePartition};
use crate::engine::{self, PredictiveSample, PredictorForm};
use crate::error::{Error, Result};
use crate::portfolio::{self, TradeDecision};
use crate::rng::Stage;
use crate::selection::{self, ParentalSets, SelectionConfig};
use crate::wdlm::{self, MatrixNIWBelief};

/// Number of past one-step errors averaged by the lagged-error predictor.
pub const ERROR_WINDOW: usize = 5;

/// External predictor vector of one series. The lagged-error form averages
/// the most recent errors, using however many exist (up to five) before the
/// window fills.
pub fn compute_predictor(errors: &[f64], form: PredictorForm) -> DVector<f64> {
    match form {
        PredictorForm::LocalLevel => DVector::from_element(1, 1.0),
        PredictorForm::LaggedErrorMean => {
            let recent = &errors[errors.len().saturating_sub(ERROR_WINDOW)..];
            let x = if recent.is_empty() {
                0.0
            } else {
                recent.iter().sum::<f64>() / recent.len() as f64
            };
            DVector::from_vec(vec![1.0, x])
        }
    }
}

/// One-step forecast handed to the decision stage.
struct Forecast {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    kind: ForecastKind,
}

enum ForecastKind {
    Sgdlm(Box<PredictiveSample>),
    Wdlm(wdlm::WdlmForecast),
}

impl Forecast {
    fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        match &self.kind {
            ForecastKind::Sgdlm(p) => p.log_density(y),
            ForecastKind::Wdlm(f) => f.ln_density(y),
        }
    }

    fn pit(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.kind {
            ForecastKind::Sgdlm(p) => Ok(DVector::from_fn(y.len(), |j, _| p.marginal_cdf(j, y[j]))),
            ForecastKind::Wdlm(f) => {
                let mut out = DVector::zeros(y.len());
                for j in 0..y.len() {
                    let t = StudentsT::new(f.mode[j], f.scale[(j, j)].sqrt(), f.dof)
                        .map_err(|e| Error::Numerical(format!("marginal forecast of series {j}: {e}")))?;
                    out[j] = t.cdf(y[j]);
                }
                Ok(out)
            }
        }
    }
}

struct SgdlmState {
    priors: Vec<NormalGammaBelief>,
    partitions: Vec<StatePartition>,
    sets: Vec<ParentalSets>,
    /// Prior of the proposal model for the current step.
    proposal: Option<MatrixNIWBelief>,
    /// Forecast means of previous steps, for the lagged-error predictor.
    past_means: Vec<DVector<f64>>,
    predictors: Vec<DVector<f64>>,
}

enum ModelState {
    Sgdlm(Box<SgdlmState>),
    Wdlm(MatrixNIWBelief),
}

fn initial_sgdlm(cfg: &ModelConfig, m: usize) -> Result<SgdlmState> {
    let s = &cfg.sgdlm;
    let n_phi = s.predictor.n_phi();
    let sets: Vec<ParentalSets> = (0..m)
        .map(|j| match &s.parents {
            Some(p) => ParentalSets::with_core(j, p[j].iter().copied()),
            None => Ok(ParentalSets::new(j)),
        })
        .collect::<Result<_>>()?;
    let partitions: Vec<StatePartition> = sets.iter().map(|st| st.partition(n_phi)).collect::<Result<_>>()?;
    let priors = partitions
        .iter()
        .map(|part| {
            let p = part.dim();
            let diag = DVector::from_fn(p, |i, _| if i < n_phi { s.prior.phi_var } else { s.prior.gamma_var });
            NormalGammaBelief::new(
                DVector::zeros(p),
                DMatrix::from_diagonal(&diag),
                s.prior.dof,
                s.prior.precision_scale,
                BeliefRole::Prior,
            )
        })
        .collect::<Result<_>>()?;
    let proposal = cfg.selection_enabled.then(|| MatrixNIWBelief::default_prior(1, m));
    Ok(SgdlmState {
        priors,
        partitions,
        sets,
        proposal,
        past_means: Vec::new(),
        predictors: Vec::new(),
    })
}

impl SgdlmState {
    fn forecast(&mut self, cfg: &ModelConfig, history: &PanelView<'_>, t: usize, diag: &mut RunDiagnostics) -> Result<Forecast> {
        let m = self.priors.len();
        let form = cfg.sgdlm.predictor;
        let predictors: Vec<DVector<f64>> = if form == PredictorForm::LocalLevel {
            vec![compute_predictor(&[], form); m]
        } else {
            let start = history.len().saturating_sub(ERROR_WINDOW);
            let mut errors = vec![Vec::with_capacity(ERROR_WINDOW); m];
            for k in start..history.len() {
                let y = history.row(k)?;
                for j in 0..m {
                    errors[j].push(y[j] - self.past_means[k][j]);
                }
            }
            errors.iter().map(|e| compute_predictor(e, form)).collect()
        };
        let sample = engine::sample_normal_gamma(&self.priors, cfg.sgdlm.n_draws, cfg.seed, Stage::Forecast, t as u64)?;
        let pred = PredictiveSample::new(sample, &self.partitions, &predictors)?;
        diag.dropped_forecast_draws += pred.n_dropped();
        let moments = pred.moments();
        let (mean, covariance) = (moments.mean.clone(), moments.covariance.clone());
        self.past_means.push(mean.clone());
        self.predictors = predictors;
        Ok(Forecast {
            mean,
            covariance,
            kind: ForecastKind::Sgdlm(Box::new(pred)),
        })
    }

    /// Update, recouple, review parents, decouple and evolve to the next
    /// step's priors.
    fn advance(
        &mut self,
        cfg: &ModelConfig,
        y: &DVector<f64>,
        t: usize,
        diag: &mut RunDiagnostics,
    ) -> Result<(Option<f64>, Option<engine::Entropy>, Option<SelectionDay>, Vec<NormalGammaBelief>)> {
        let m = self.priors.len();
        let updated: Vec<(NormalGammaBelief, dlm::UpdateStats)> = (0..m)
            .into_par_iter()
            .map(|j| {
                let part = &self.partitions[j];
                let mut f = DVector::zeros(part.dim());
                f.rows_mut(0, part.n_phi()).copy_from(&self.predictors[j]);
                for (g, &k) in part.parents().iter().enumerate() {
                    f[part.n_phi() + g] = y[k];
                }
                dlm::update(&self.priors[j], &f, y[j]).map_err(|e| e.context(format!("series {j}")))
            })
            .collect::<Result<_>>()?;
        diag.psd_repairs += updated.iter().filter(|(_, s)| s.psd_repaired).count();
        let posteriors: Vec<NormalGammaBelief> = updated.into_iter().map(|(b, _)| b).collect();

        let (sample, rec) = engine::recouple(
            &posteriors,
            &self.partitions,
            cfg.sgdlm.n_draws,
            cfg.seed,
            t as u64,
            cfg.sgdlm.ess_floor,
        )?;
        diag.ess_floor_hits += rec.below_floor as usize;
        diag.sign_changes += rec.sign_varies as usize;
        diag.singular_draws += rec.n_singular;

        let selection_day = match self.proposal.take() {
            Some(prior) => {
                let post = wdlm::wdlm_update(&prior, &DVector::from_element(1, 1.0), y)?;
                let (omega, ridged) = wdlm::precision_estimate(&post)?;
                diag.proposal_ridges += ridged as usize;
                let day = self.review_parents(&cfg.selection, &omega)?;
                self.proposal = Some(wdlm::wdlm_evolve(&post, cfg.proposal.delta, cfg.proposal.beta)?);
                Some(day)
            }
            None => None,
        };

        // With no simultaneous parents anywhere the product of the updated
        // posteriors is already exact.
        let no_parents = self.partitions.iter().all(|p| p.n_gamma() == 0);
        let (decoupled, entropy) = if no_parents {
            (
                posteriors.clone(),
                engine::Entropy {
                    raw: 0.0,
                    value: 0.0,
                    degenerate: false,
                },
            )
        } else {
            let d = engine::vb_decouple(&sample, &posteriors)?;
            diag.dof_fallbacks += d.stats.iter().filter(|s| s.dof_fallback).count();
            diag.vb_ridges += d.stats.iter().filter(|s| s.ridge_applied).count();
            (d.beliefs, d.entropy)
        };
        diag.degenerate_entropy += entropy.degenerate as usize;

        let n_phi = cfg.sgdlm.predictor.n_phi();
        let next: Vec<(StatePartition, NormalGammaBelief)> = (0..m)
            .into_par_iter()
            .map(|j| {
                let sets = &self.sets[j];
                let part = sets.partition(n_phi)?;
                let belief = selection::restructure_belief(&decoupled[j], &self.partitions[j], &part, &cfg.selection)?;
                let spec = EvolutionSpec::new(cfg.sgdlm.delta_phi, cfg.sgdlm.delta_gamma, cfg.sgdlm.beta)?
                    .with_transition(sets.transition_diag(&part, cfg.selection.warmup_span)?);
                let prior = dlm::evolve(&belief, &spec, &part)?;
                Ok((part, prior))
            })
            .collect::<Result<_>>()?;
        let (partitions, priors) = next.into_iter().unzip();
        self.partitions = partitions;
        self.priors = priors;
        Ok((Some(rec.ess), Some(entropy), selection_day, posteriors))
    }

    fn review_parents(&mut self, cfg: &SelectionConfig, omega: &DMatrix<f64>) -> Result<SelectionDay> {
        let before = self.sets.clone();
        let reviewed: Vec<(ParentalSets, selection::ReviewEvents, usize)> = (0..self.sets.len())
            .into_par_iter()
            .map(|j| {
                let mut sets = self.sets[j].clone();
                sets.increment_ages();
                let snr = selection::snr_by_parent(&self.priors[j], &self.partitions[j])?;
                let (mut next, events) = selection::review(&sets, &snr, cfg)?;
                let row: Vec<f64> = omega.row(j).iter().copied().collect();
                let candidates = selection::propose_candidates(&row, &next, cfg);
                let admitted = selection::admit(&mut next, &candidates, cfg).len();
                next.check_invariants(cfg)?;
                Ok((next, events, admitted))
            })
            .collect::<Result<_>>()?;
        let mut day = SelectionDay {
            membership: Vec::with_capacity(reviewed.len()),
            core_churn: 0.0,
            promoted: 0,
            demoted: 0,
            removed: 0,
            admitted: 0,
        };
        self.sets = reviewed
            .into_iter()
            .map(|(sets, ev, admitted)| {
                day.promoted += ev.promoted.len();
                day.demoted += ev.demoted.len();
                day.removed += ev.removed.len();
                day.admitted += admitted;
                day.membership.push(sets.membership());
                sets
            })
            .collect();
        day.core_churn = selection::core_churn(&before, &self.sets);
        Ok(day)
    }

    fn membership_snapshot(&self) -> Vec<Vec<(usize, selection::Membership)>> {
        self.sets.iter().map(|s| s.membership()).collect()
    }
}

fn wdlm_forecast(prior: &MatrixNIWBelief) -> Result<Forecast> {
    let f = wdlm::wdlm_forecast(prior, &DVector::from_element(1, 1.0))?;
    let covariance = f.covariance.clone().unwrap_or_else(|| f.scale.clone());
    Ok(Forecast {
        mean: f.mode.clone(),
        covariance,
        kind: ForecastKind::Wdlm(f),
    })
}

struct StrategyState {
    spec: StrategySpec,
    /// Weights after the previous day's drift; `None` before the first trade.
    weights: Option<DVector<f64>>,
    ruined: bool,
}

impl StrategyState {
    /// Trade decision for the day. `None` when the optimiser's constraints
    /// are degenerate for this forecast; the position is then left unchanged.
    fn decide(&self, forecast: &Forecast, benchmark: usize, cost_rate: f64) -> Result<Option<TradeDecision>> {
        let m = forecast.mean.len();
        let (p, cov) = (&forecast.mean, &forecast.covariance);
        let target = match self.spec.rule {
            Rule::Benchmark => Ok(DVector::from_fn(m, |i, _| if i == benchmark { 1.0 } else { 0.0 })),
            Rule::EqualWeight => Ok(DVector::from_element(m, 1.0 / m as f64)),
            Rule::MinVariance => portfolio::min_variance(p, cov),
            Rule::TargetReturn(tau) => portfolio::target_return(p, cov, tau),
            Rule::BenchmarkNeutral(tau) => {
                let (p, cov) = benchmark_first(p, cov, benchmark);
                portfolio::benchmark_neutral(&p, &cov, tau).map(|w| unpermute(&w, benchmark))
            }
        };
        let target = match target {
            Ok(w) => w,
            Err(Error::DegenerateConstraint { index, name }) => {
                log::warn!("strategy {}: constraint {index} ({name}) degenerate; position unchanged", self.spec.name);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        Ok(Some(match &self.weights {
            None => TradeDecision::full(&DVector::zeros(m), &target, cost_rate),
            Some(w) if self.spec.uses_churn_rule() => portfolio::churn_adjust(w, &target, p, cost_rate),
            Some(w) => TradeDecision::full(w, &target, cost_rate),
        }))
    }
}

/// Reorder so that the benchmark is series 0.
fn benchmark_first(p: &DVector<f64>, cov: &DMatrix<f64>, b: usize) -> (DVector<f64>, DMatrix<f64>) {
    if b == 0 {
        return (p.clone(), cov.clone());
    }
    let m = p.len();
    let order: Vec<usize> = std::iter::once(b).chain((0..m).filter(|&i| i != b)).collect();
    (
        DVector::from_fn(m, |i, _| p[order[i]]),
        DMatrix::from_fn(m, m, |i, k| cov[(order[i], order[k])]),
    )
}

fn unpermute(w: &DVector<f64>, b: usize) -> DVector<f64> {
    if b == 0 {
        return w.clone();
    }
    let m = w.len();
    let order: Vec<usize> = std::iter::once(b).chain((0..m).filter(|&i| i != b)).collect();
    let mut out = DVector::zeros(m);
    for (i, &o) in order.iter().enumerate() {
        out[o] = w[i];
    }
    out
}

/// Run the full daily cycle over `panel`: forecast, trade, observe, update,
/// recouple, review parents, decouple and evolve.
pub fn run_filter(panel: &ReturnsPanel, cfg: &ModelConfig) -> Result<BacktestLedger> {
    let m = panel.n_series();
    cfg.validate(m)?;
    let benchmark = panel.benchmark_index();
    let cost_rate = cfg.cost_rate();
    let mut diag = RunDiagnostics::default();
    let mut model = match cfg.kind {
        ModelKind::Sgdlm => ModelState::Sgdlm(Box::new(initial_sgdlm(cfg, m)?)),
        ModelKind::Wdlm => ModelState::Wdlm(MatrixNIWBelief::default_prior(1, m)),
    };
    let mut strategies: Vec<StrategyState> = cfg
        .strategies
        .iter()
        .map(|spec| StrategyState {
            spec: spec.clone(),
            weights: None,
            ruined: false,
        })
        .collect();
    let mut rows = Vec::with_capacity(panel.n_steps());
    let mut final_posteriors = Vec::new();

    for t in 0..panel.n_steps() {
        let date = panel.dates()[t];
        let step = |e: Error| e.context(format!("{}", date.format(super::data::DATE_FORMAT)));

        // Decision stage: only rows before t are visible.
        let history = panel.history(t);
        let forecast = match &mut model {
            ModelState::Sgdlm(s) => s.forecast(cfg, &history, t, &mut diag),
            ModelState::Wdlm(prior) => wdlm_forecast(prior),
        }
        .map_err(step)?;
        let decisions: Vec<Option<TradeDecision>> = strategies
            .iter()
            .map(|s| {
                if s.ruined {
                    return Ok(None);
                }
                let d = s
                    .decide(&forecast, benchmark, cost_rate)
                    .map_err(|e| e.context(format!("strategy {}", s.spec.name)))?;
                Ok(Some(d.unwrap_or_else(|| {
                    diag.degenerate_portfolios += 1;
                    let w = s.weights.clone().unwrap_or_else(|| DVector::zeros(m));
                    TradeDecision::hold(&w, &w)
                })))
            })
            .collect::<Result<_>>()
            .map_err(step)?;

        let y = panel.row(t);
        let log_density = forecast.log_density(&y).map_err(step)?;
        let pit = forecast.pit(&y).map_err(step)?;
        let abs_errors = (&y - &forecast.mean).abs();
        let forecast_sd = forecast.covariance.diagonal().map(|v| v.max(0.0).sqrt());

        let mut strategy_days = Vec::with_capacity(strategies.len());
        for (s, decision) in strategies.iter_mut().zip(decisions) {
            let day = match decision {
                Some(d) => {
                    // An untraded strategy is still in cash.
                    let in_cash = s.weights.is_none() && !d.traded;
                    let net = if in_cash {
                        Some(0.0)
                    } else {
                        portfolio::realized_step(&d.executed_weights, &y, d.cost)
                    };
                    match net {
                        Some(_) if in_cash => {}
                        Some(_) => s.weights = portfolio::drift_weights(&d.executed_weights, &y),
                        None => {
                            s.ruined = true;
                            s.weights = None;
                            log::warn!("strategy {} ruined on {date}", s.spec.name);
                            diag.ruins.push((s.spec.name.clone(), date));
                        }
                    }
                    StrategyDay {
                        weights: d.executed_weights,
                        turnover: d.turnover,
                        cost: d.cost,
                        traded: d.traded,
                        net_log_return: net,
                    }
                }
                None => StrategyDay {
                    weights: DVector::zeros(m),
                    turnover: 0.0,
                    cost: 0.0,
                    traded: false,
                    net_log_return: None,
                },
            };
            strategy_days.push(day);
        }

        let (ess, entropy, selection_day) = match &mut model {
            ModelState::Sgdlm(s) => {
                let (ess, entropy, sel, post) = s.advance(cfg, &y, t, &mut diag).map_err(step)?;
                let sel = sel.or_else(|| {
                    Some(SelectionDay {
                        membership: s.membership_snapshot(),
                        core_churn: 0.0,
                        promoted: 0,
                        demoted: 0,
                        removed: 0,
                        admitted: 0,
                    })
                });
                final_posteriors = post;
                (ess, entropy, sel)
            }
            ModelState::Wdlm(prior) => {
                let post = wdlm::wdlm_update(prior, &DVector::from_element(1, 1.0), &y).map_err(step)?;
                *prior = wdlm::wdlm_evolve(&post, cfg.wdlm.delta, cfg.wdlm.beta).map_err(step)?;
                (None, None, None)
            }
        };

        rows.push(DayRecord {
            date,
            forecast_mean: forecast.mean,
            forecast_sd,
            observation: y,
            log_density,
            abs_errors,
            pit,
            ess,
            entropy,
            selection: selection_day,
            strategies: strategy_days,
        });
    }

    let strategy_names: Vec<String> = cfg.strategies.iter().map(|s| s.name.clone()).collect();
    let summary = metrics(&rows, &strategy_names);
    let final_sets = match &model {
        ModelState::Sgdlm(s) => s.sets.clone(),
        ModelState::Wdlm(_) => Vec::new(),
    };
    Ok(BacktestLedger {
        series_ids: panel.series_ids().to_vec(),
        strategy_names,
        rows,
        summary,
        diagnostics: diag,
        config_echo: cfg.echo(),
        seed: cfg.seed,
        entropy_window: cfg.entropy_window,
        final_posteriors,
        final_sets,
    })
}
