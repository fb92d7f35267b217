//! Per-day backtest records and the summary metrics derived from them.

use chrono::NaiveDate;
use nalgebra::DVector;

use crate::dlm::NormalGammaBelief;
use crate::engine::Entropy;
use crate::portfolio::TRADING_DAYS;
use crate::selection::{Membership, ParentalSets};

/// Starting capital of every strategy.
pub const INITIAL_VALUE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyDay {
    /// Weights held over the day (after trading).
    pub weights: DVector<f64>,
    pub turnover: f64,
    pub cost: f64,
    pub traded: bool,
    /// Net log-return; `None` once the strategy is ruined.
    pub net_log_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDay {
    /// Parents of each series after the day's review, ascending.
    pub membership: Vec<Vec<(usize, Membership)>>,
    /// Fraction of series whose core set changed.
    pub core_churn: f64,
    pub promoted: usize,
    pub demoted: usize,
    pub removed: usize,
    pub admitted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub forecast_mean: DVector<f64>,
    pub forecast_sd: DVector<f64>,
    pub observation: DVector<f64>,
    /// `log p(y_t | D_{t-1})`.
    pub log_density: f64,
    pub abs_errors: DVector<f64>,
    /// Probability integral transform of each observation under its marginal
    /// forecast distribution.
    pub pit: DVector<f64>,
    pub ess: Option<f64>,
    pub entropy: Option<Entropy>,
    pub selection: Option<SelectionDay>,
    pub strategies: Vec<StrategyDay>,
}

/// Counts of numerical events worth reporting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunDiagnostics {
    pub psd_repairs: usize,
    pub ess_floor_hits: usize,
    pub sign_changes: usize,
    pub singular_draws: usize,
    pub dropped_forecast_draws: usize,
    pub dof_fallbacks: usize,
    pub vb_ridges: usize,
    pub proposal_ridges: usize,
    pub degenerate_entropy: usize,
    /// Strategy-days on which the optimiser's constraints were degenerate.
    pub degenerate_portfolios: usize,
    pub ruins: Vec<(String, NaiveDate)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySummary {
    pub name: String,
    pub annual_return: f64,
    pub annual_volatility: f64,
    /// Return over volatility; `±inf` when the volatility is zero.
    pub sharpe: f64,
    pub final_value: f64,
    pub active_days: usize,
    pub ruined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerSummary {
    pub n_steps: usize,
    pub log_likelihood: f64,
    pub mad: f64,
    /// Share of observations inside their central 90% forecast interval.
    pub coverage_90: f64,
    pub strategies: Vec<StrategySummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestLedger {
    pub series_ids: Vec<String>,
    pub strategy_names: Vec<String>,
    pub rows: Vec<DayRecord>,
    pub summary: LedgerSummary,
    pub diagnostics: RunDiagnostics,
    pub config_echo: String,
    /// Seed the Monte Carlo streams were drawn with.
    pub seed: u64,
    pub entropy_window: usize,
    /// SGDLM posteriors after the final update (empty for the Wishart model).
    pub final_posteriors: Vec<NormalGammaBelief>,
    pub final_sets: Vec<ParentalSets>,
}

impl BacktestLedger {
    /// Portfolio value path of strategy `s`, one entry per row.
    pub fn values(&self, s: usize) -> Vec<f64> {
        let mut log_value = INITIAL_VALUE.ln();
        let mut alive = true;
        self.rows
            .iter()
            .map(|row| {
                match row.strategies[s].net_log_return {
                    Some(r) if alive => log_value += r,
                    _ => alive = false,
                }
                if alive {
                    log_value.exp()
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Annualised mean, volatility and their ratio for daily net log-returns.
/// Volatility uses the sample standard deviation.
pub fn annualize(daily: &[f64]) -> (f64, f64, f64) {
    let n = daily.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = daily.iter().sum::<f64>() / n as f64;
    let mut var = if n > 1 {
        daily.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    // Spread at the level of rounding in the mean counts as zero.
    if var.sqrt() <= 4.0 * f64::EPSILON * mean.abs() {
        var = 0.0;
    }
    let ret = TRADING_DAYS * mean;
    let vol = (TRADING_DAYS * var).sqrt();
    let sharpe = if vol > 0.0 {
        ret / vol
    } else if ret < 0.0 {
        f64::NEG_INFINITY
    } else {
        f64::INFINITY
    };
    (ret, vol, sharpe)
}

/// Recompute all summary metrics from the per-day rows.
pub fn metrics(rows: &[DayRecord], strategy_names: &[String]) -> LedgerSummary {
    let log_likelihood = rows.iter().map(|r| r.log_density).sum();
    let (abs_sum, count) = rows
        .iter()
        .fold((0.0, 0usize), |(s, c), r| (s + r.abs_errors.sum(), c + r.abs_errors.len()));
    let inside = rows
        .iter()
        .flat_map(|r| r.pit.iter())
        .filter(|&&u| (0.05..=0.95).contains(&u))
        .count();
    let strategies = strategy_names
        .iter()
        .enumerate()
        .map(|(s, name)| {
            let daily: Vec<f64> = rows
                .iter()
                .map_while(|r| r.strategies[s].net_log_return)
                .collect();
            let ruined = daily.len() < rows.len();
            let (annual_return, annual_volatility, sharpe) = annualize(&daily);
            let final_value = if ruined {
                0.0
            } else {
                INITIAL_VALUE * daily.iter().sum::<f64>().exp()
            };
            StrategySummary {
                name: name.clone(),
                annual_return,
                annual_volatility,
                sharpe,
                final_value,
                active_days: daily.len(),
                ruined,
            }
        })
        .collect();
    LedgerSummary {
        n_steps: rows.len(),
        log_likelihood,
        mad: if count > 0 { abs_sum / count as f64 } else { f64::NAN },
        coverage_90: if count > 0 { inside as f64 / count as f64 } else { f64::NAN },
        strategies,
    }
}

/// Z-score of each finite value against the trailing window ending at it.
/// Entries with fewer than two finite values in the window, or zero spread,
/// are `None`.
pub fn standardize_trailing(values: &[f64], window: usize) -> Vec<Option<f64>> {
    (0..values.len())
        .map(|t| {
            let x = values[t];
            if !x.is_finite() {
                return None;
            }
            let lo = (t + 1).saturating_sub(window);
            let w: Vec<f64> = values[lo..=t].iter().copied().filter(|v| v.is_finite()).collect();
            if w.len() < 2 {
                return None;
            }
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
            (sd > 0.0).then(|| (x - mean) / sd)
        })
        .collect()
}
