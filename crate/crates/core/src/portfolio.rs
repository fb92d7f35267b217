//! Equality-constrained mean/variance portfolio rules, the churn-reduction
//! trade rule and daily return accounting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Trading days per year used for targets and annualisation.
pub const TRADING_DAYS: f64 = 252.0;
/// Daily target return of the target-return strategies (10% a year).
pub const TARGET_RETURN_LOW: f64 = 0.10 / TRADING_DAYS;
/// Daily target return of the higher-target strategies (15% a year).
pub const TARGET_RETURN_HIGH: f64 = 0.15 / TRADING_DAYS;

/// One linear equality constraint `vector' w = rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: &'static str,
    pub vector: DVector<f64>,
    pub rhs: f64,
}

impl Constraint {
    pub fn budget(m: usize) -> Self {
        Constraint {
            name: "budget",
            vector: DVector::from_element(m, 1.0),
            rhs: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioProblem {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub constraints: Vec<Constraint>,
}

impl PortfolioProblem {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if m == 0 || covariance.shape() != (m, m) {
            return Err(Error::Structure("portfolio mean and covariance dimensions disagree".into()));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite portfolio inputs".into()));
        }
        Ok(PortfolioProblem {
            mean,
            covariance,
            constraints: vec![Constraint::budget(m)],
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn with(mut self, constraint: Constraint) -> Self {
        self.constraints.push(constraint);
        self
    }

    pub fn variance(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.covariance * w))
    }
}

/// Locate the first constraint that is (numerically) a linear combination of
/// the ones before it.
fn dependent_constraint(constraints: &[Constraint]) -> Option<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for (i, c) in constraints.iter().enumerate() {
        let norm = c.vector.norm();
        if norm == 0.0 {
            return Some(i);
        }
        let mut v = &c.vector / norm;
        for b in &basis {
            v -= b * b.dot(&v);
        }
        for b in &basis {
            v -= b * b.dot(&v);
        }
        let r = v.norm();
        if r < 1e-9 {
            return Some(i);
        }
        basis.push(v / r);
    }
    None
}

/// Minimise `w' P w` subject to the problem's equality constraints by solving
/// the KKT system `[2P C'; C 0] [w; ν] = [0; b]`.
pub fn solve_equality_qp(problem: &PortfolioProblem) -> Result<DVector<f64>> {
    let m = problem.dim();
    let cons = &problem.constraints;
    if cons.first().is_none_or(|c| c.name != "budget") {
        return Err(Error::Contract("portfolio problem must start with the budget constraint".into()));
    }
    if cons.iter().any(|c| c.vector.len() != m) {
        return Err(Error::Structure("constraint vector length does not match the portfolio".into()));
    }
    if let Some(i) = dependent_constraint(cons) {
        return Err(Error::DegenerateConstraint {
            index: i,
            name: cons[i].name.to_string(),
        });
    }
    let k = cons.len();
    let ridge = 1e-10 * problem.covariance.trace() / m as f64;
    let mut kkt = DMatrix::zeros(m + k, m + k);
    for i in 0..m {
        for j in 0..m {
            kkt[(i, j)] = problem.covariance[(i, j)] + problem.covariance[(j, i)];
        }
        kkt[(i, i)] += 2.0 * ridge;
    }
    let mut rhs = DVector::zeros(m + k);
    for (c, con) in cons.iter().enumerate() {
        for i in 0..m {
            kkt[(m + c, i)] = con.vector[i];
            kkt[(i, m + c)] = con.vector[i];
        }
        rhs[m + c] = con.rhs;
    }
    let sol = kkt.lu().solve(&rhs).ok_or_else(|| Error::DegenerateConstraint {
        index: k - 1,
        name: cons[k - 1].name.to_string(),
    })?;
    let w = sol.rows(0, m).into_owned();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("portfolio KKT solve produced non-finite weights".into()));
    }
    Ok(w)
}

pub fn min_variance(mean: &DVector<f64>, covariance: &DMatrix<f64>) -> Result<DVector<f64>> {
    solve_equality_qp(&PortfolioProblem::new(mean.clone(), covariance.clone())?)
}

fn target_constraint(mean: &DVector<f64>, tau: f64) -> Constraint {
    Constraint {
        name: "target_return",
        vector: mean.clone(),
        rhs: tau,
    }
}

pub fn target_return(mean: &DVector<f64>, covariance: &DMatrix<f64>, tau: f64) -> Result<DVector<f64>> {
    let problem = PortfolioProblem::new(mean.clone(), covariance.clone())?.with(target_constraint(mean, tau));
    solve_equality_qp(&problem)
}

/// Zero weight on the benchmark (series 0) and zero forecast covariance with
/// it, optionally with a target return.
///
/// Given the zero benchmark weight, the covariance constraint only involves
/// the other assets; when those are all uncorrelated with the benchmark it is
/// implied and dropped.
pub fn benchmark_neutral(mean: &DVector<f64>, covariance: &DMatrix<f64>, tau: Option<f64>) -> Result<DVector<f64>> {
    let m = mean.len();
    let mut problem = PortfolioProblem::new(mean.clone(), covariance.clone())?.with(Constraint {
        name: "benchmark_weight",
        vector: DVector::from_fn(m, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        rhs: 0.0,
    });
    let mut cross = covariance.column(0).into_owned();
    cross[0] = 0.0;
    if cross.iter().any(|&v| v != 0.0) {
        problem = problem.with(Constraint {
            name: "benchmark_covariance",
            vector: cross,
            rhs: 0.0,
        });
    }
    if let Some(tau) = tau {
        problem = problem.with(target_constraint(mean, tau));
    }
    solve_equality_qp(&problem)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeDecision {
    pub target_weights: DVector<f64>,
    pub executed_weights: DVector<f64>,
    pub turnover: f64,
    pub cost: f64,
    pub traded: bool,
}

impl TradeDecision {
    /// Move fully to `target`, paying `cost_rate` per unit of L1 turnover.
    pub fn full(current: &DVector<f64>, target: &DVector<f64>, cost_rate: f64) -> Self {
        let turnover = (target - current).lp_norm(1);
        TradeDecision {
            target_weights: target.clone(),
            executed_weights: target.clone(),
            turnover,
            cost: cost_rate * turnover,
            traded: true,
        }
    }

    pub fn hold(current: &DVector<f64>, target: &DVector<f64>) -> Self {
        TradeDecision {
            target_weights: target.clone(),
            executed_weights: current.clone(),
            turnover: 0.0,
            cost: 0.0,
            traded: false,
        }
    }
}

/// Trade to the target only when the expected gain `p'(w⁰ - w)` covers the
/// cost of the trade; otherwise keep the current weights. Trading is free
/// when `cost_rate` is zero, so the target is then always adopted.
pub fn churn_adjust(
    current: &DVector<f64>,
    target: &DVector<f64>,
    mean: &DVector<f64>,
    cost_rate: f64,
) -> TradeDecision {
    let delta = target - current;
    let turnover = delta.lp_norm(1);
    if turnover == 0.0 {
        return TradeDecision::hold(current, target);
    }
    let gain = mean.dot(&delta);
    if cost_rate == 0.0 || gain >= cost_rate * turnover {
        TradeDecision::full(current, target, cost_rate)
    } else {
        TradeDecision::hold(current, target)
    }
}

/// Net log-return of one day: `log(w' exp(y)) - cost`. `None` signals ruin
/// (non-positive gross value).
pub fn realized_step(executed: &DVector<f64>, returns: &DVector<f64>, cost: f64) -> Option<f64> {
    let gross: f64 = executed.iter().zip(returns.iter()).map(|(w, y)| w * y.exp()).sum();
    (gross > 0.0 && gross.is_finite()).then(|| gross.ln() - cost)
}

/// Weights after one day of returns without rebalancing.
pub fn drift_weights(weights: &DVector<f64>, returns: &DVector<f64>) -> Option<DVector<f64>> {
    let grown = weights.component_mul(&returns.map(f64::exp));
    let total = grown.sum();
    (total > 0.0 && total.is_finite()).then(|| grown / total)
}
