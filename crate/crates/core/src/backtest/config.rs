//! Run configuration, the flat `key = value` config format and the named
//! model presets.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;

use crate::engine::PredictorForm;
use crate::error::{Error, Result};
use crate::portfolio::{TARGET_RETURN_HIGH, TARGET_RETURN_LOW};
use crate::selection::SelectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Sgdlm,
    Wdlm,
}

/// Initial normal/gamma prior shared by all series.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSettings {
    pub phi_var: f64,
    pub gamma_var: f64,
    pub dof: f64,
    pub precision_scale: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        PriorSettings {
            phi_var: 1e-2,
            gamma_var: 1e-4,
            dof: 5.0,
            precision_scale: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdlmSettings {
    pub predictor: PredictorForm,
    pub beta: f64,
    pub delta_phi: f64,
    pub delta_gamma: f64,
    pub prior: PriorSettings,
    pub n_draws: usize,
    pub ess_floor: Option<f64>,
    /// Fixed initial parents per series (core set at `t = 0`).
    pub parents: Option<Vec<Vec<usize>>>,
}

impl Default for SgdlmSettings {
    fn default() -> Self {
        SgdlmSettings {
            predictor: PredictorForm::LocalLevel,
            beta: 0.95,
            delta_phi: 0.995,
            delta_gamma: 0.995,
            prior: PriorSettings::default(),
            n_draws: 5000,
            ess_floor: None,
            parents: None,
        }
    }
}

/// Discounts of a Wishart DLM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdlmSettings {
    pub delta: f64,
    pub beta: f64,
}

/// Portfolio rule of one strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    /// Passive holding of the benchmark series.
    Benchmark,
    /// Equal weights, rebalanced daily.
    EqualWeight,
    MinVariance,
    TargetReturn(f64),
    BenchmarkNeutral(Option<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpec {
    pub name: String,
    pub rule: Rule,
}

impl StrategySpec {
    pub fn named(name: &str) -> Result<Self> {
        let rule = match name.trim_end_matches('*').to_ascii_uppercase().as_str() {
            "SPX" => Rule::Benchmark,
            "P0" => Rule::EqualWeight,
            "P1" => Rule::MinVariance,
            "P2" => Rule::TargetReturn(TARGET_RETURN_LOW),
            "P3" => Rule::TargetReturn(TARGET_RETURN_HIGH),
            "P4" => Rule::BenchmarkNeutral(None),
            "P5" => Rule::BenchmarkNeutral(Some(TARGET_RETURN_LOW)),
            "P6" => Rule::BenchmarkNeutral(Some(TARGET_RETURN_HIGH)),
            _ => return Err(Error::Config(format!("unknown strategy '{name}'"))),
        };
        let name = match rule {
            Rule::Benchmark | Rule::EqualWeight => name.trim_end_matches('*').to_ascii_uppercase(),
            _ => format!("{}*", name.trim_end_matches('*').to_ascii_uppercase()),
        };
        Ok(StrategySpec { name, rule })
    }

    /// Optimised strategies trade through the churn-reduction rule.
    pub fn uses_churn_rule(&self) -> bool {
        !matches!(self.rule, Rule::Benchmark | Rule::EqualWeight)
    }

    pub fn all() -> Vec<StrategySpec> {
        ["SPX", "P0", "P1", "P2", "P3", "P4", "P5", "P6"]
            .iter()
            .map(|n| StrategySpec::named(n).expect("built-in strategy"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub sgdlm: SgdlmSettings,
    pub wdlm: WdlmSettings,
    /// Wishart model used to propose simultaneous parents.
    pub proposal: WdlmSettings,
    pub selection_enabled: bool,
    pub selection: SelectionConfig,
    pub strategies: Vec<StrategySpec>,
    pub cost_bp: f64,
    pub seed: u64,
    /// Trailing window for the standardised entropy series.
    pub entropy_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Sgdlm,
            sgdlm: SgdlmSettings::default(),
            wdlm: WdlmSettings { delta: 0.995, beta: 0.95 },
            proposal: WdlmSettings { delta: 0.95, beta: 0.8 },
            selection_enabled: true,
            selection: SelectionConfig::default(),
            strategies: StrategySpec::all(),
            cost_bp: 10.0,
            seed: 1,
            entropy_window: 60,
        }
    }
}

fn check_discount(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} outside (0, 1]")))
    }
}

impl ModelConfig {
    /// A named preset: `M1`–`M5` (local level), `MA1`–`MA5` (lagged error
    /// predictor) with parental discount 0.995–0.999, or `W1`–`W5` (Wishart
    /// DLM with level discount 0.995–0.999).
    pub fn preset(name: &str) -> Result<Self> {
        let upper = name.to_ascii_uppercase();
        let (family, idx) = upper.split_at(upper.trim_end_matches(|c: char| c.is_ascii_digit()).len());
        let idx: usize = idx.parse().map_err(|_| Error::Config(format!("unknown preset '{name}'")))?;
        if !(1..=5).contains(&idx) {
            return Err(Error::Config(format!("unknown preset '{name}'")));
        }
        let level = [0.995, 0.996, 0.997, 0.998, 0.999][idx - 1];
        let mut cfg = ModelConfig::default();
        match family {
            "M" => cfg.sgdlm.delta_gamma = level,
            "MA" => {
                cfg.sgdlm.predictor = PredictorForm::LaggedErrorMean;
                cfg.sgdlm.delta_gamma = level;
            }
            "W" => {
                cfg.kind = ModelKind::Wdlm;
                cfg.wdlm = WdlmSettings { delta: level, beta: 0.95 };
            }
            _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
        }
        Ok(cfg)
    }

    pub fn cost_rate(&self) -> f64 {
        self.cost_bp * 1e-4
    }

    pub fn validate(&self, n_series: usize) -> Result<()> {
        let s = &self.sgdlm;
        for (name, v) in [
            ("model.beta", s.beta),
            ("model.delta_phi", s.delta_phi),
            ("model.delta_gamma", s.delta_gamma),
            ("wdlm.delta", self.wdlm.delta),
            ("wdlm.beta", self.wdlm.beta),
            ("proposal.delta", self.proposal.delta),
            ("proposal.beta", self.proposal.beta),
        ] {
            check_discount(name, v)?;
        }
        let p = &s.prior;
        if !(p.phi_var > 0.0 && p.gamma_var > 0.0 && p.dof > 0.0 && p.precision_scale > 0.0) {
            return Err(Error::Config("prior variances, dof and scale must be positive".into()));
        }
        if s.n_draws < 2 {
            return Err(Error::Config("mc.n_draws must be at least 2".into()));
        }
        if !(self.cost_bp >= 0.0 && self.cost_bp.is_finite()) {
            return Err(Error::Config("portfolio.cost_bp must be non-negative".into()));
        }
        if self.entropy_window < 2 {
            return Err(Error::Config("run.entropy_window must be at least 2".into()));
        }
        self.selection.validate()?;
        if let Some(parents) = &s.parents {
            if parents.len() != n_series {
                return Err(Error::Config(format!(
                    "model.parents lists {} series but the panel has {n_series}",
                    parents.len()
                )));
            }
            for (j, ps) in parents.iter().enumerate() {
                let unique: BTreeSet<_> = ps.iter().collect();
                if unique.len() != ps.len() || ps.iter().any(|&k| k == j || k >= n_series) {
                    return Err(Error::Config(format!("model.parents: invalid parent list for series {j}")));
                }
            }
        }
        if let Some(e) = &self.selection.eligible {
            if e.iter().any(|&k| k >= n_series) {
                return Err(Error::Config("selection.eligible refers to a series outside the panel".into()));
            }
        }
        Ok(())
    }

    /// Parse the flat config format. A `preset` key, if present, is applied
    /// first; the remaining keys override it.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut cfg = match entries.iter().find(|(k, _, _)| k == "preset") {
            Some((_, v, _)) => ModelConfig::preset(v)?,
            None => ModelConfig::default(),
        };
        for (key, value, line) in &entries {
            cfg.set(key, value).map_err(|e| e.context(format!("config line {line}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading config {}", path.display())))?;
        ModelConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {}
            "model.kind" => {
                self.kind = match value.to_ascii_lowercase().as_str() {
                    "sgdlm" => ModelKind::Sgdlm,
                    "wdlm" => ModelKind::Wdlm,
                    _ => return Err(Error::Config(format!("model.kind '{value}' is not sgdlm or wdlm"))),
                }
            }
            "model.predictor" => {
                self.sgdlm.predictor = match value.to_ascii_lowercase().as_str() {
                    "local_level" => PredictorForm::LocalLevel,
                    "lagged_error" => PredictorForm::LaggedErrorMean,
                    _ => return Err(Error::Config(format!("model.predictor '{value}' is not local_level or lagged_error"))),
                }
            }
            "model.beta" => self.sgdlm.beta = num(key, value)?,
            "model.delta_phi" => self.sgdlm.delta_phi = num(key, value)?,
            "model.delta_gamma" => self.sgdlm.delta_gamma = num(key, value)?,
            "model.parents" => self.sgdlm.parents = Some(parse_parents(value)?),
            "prior.phi_var" => self.sgdlm.prior.phi_var = num(key, value)?,
            "prior.gamma_var" => self.sgdlm.prior.gamma_var = num(key, value)?,
            "prior.dof" => self.sgdlm.prior.dof = num(key, value)?,
            "prior.scale" => self.sgdlm.prior.precision_scale = num(key, value)?,
            "mc.n_draws" => self.sgdlm.n_draws = num(key, value)?,
            "mc.ess_floor" => self.sgdlm.ess_floor = Some(num(key, value)?),
            "wdlm.delta" => self.wdlm.delta = num(key, value)?,
            "wdlm.beta" => self.wdlm.beta = num(key, value)?,
            "proposal.delta" => self.proposal.delta = num(key, value)?,
            "proposal.beta" => self.proposal.beta = num(key, value)?,
            "selection.enabled" => self.selection_enabled = boolean(key, value)?,
            "selection.core_target" => self.selection.core_target = num(key, value)?,
            "selection.warmup_span" => self.selection.warmup_span = num(key, value)?,
            "selection.n_max" => self.selection.n_max = num(key, value)?,
            "selection.new_parent_prior_var" => self.selection.new_parent_prior_var = num(key, value)?,
            "selection.eligible" => {
                self.selection.eligible = if value.eq_ignore_ascii_case("all") {
                    None
                } else {
                    Some(parse_list(value)?.into_iter().collect())
                }
            }
            "portfolio.cost_bp" => self.cost_bp = num(key, value)?,
            "portfolio.strategies" => {
                self.strategies = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(StrategySpec::named)
                    .collect::<Result<_>>()?
            }
            "run.seed" => self.seed = num(key, value)?,
            "run.entropy_window" => self.entropy_window = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical `key = value` listing of the full configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let s = &self.sgdlm;
        let kind = match self.kind {
            ModelKind::Sgdlm => "sgdlm",
            ModelKind::Wdlm => "wdlm",
        };
        let predictor = match s.predictor {
            PredictorForm::LocalLevel => "local_level",
            PredictorForm::LaggedErrorMean => "lagged_error",
        };
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model.kind", kind.into());
        kv("model.predictor", predictor.into());
        kv("model.beta", s.beta.to_string());
        kv("model.delta_phi", s.delta_phi.to_string());
        kv("model.delta_gamma", s.delta_gamma.to_string());
        if let Some(parents) = &s.parents {
            kv("model.parents", format_parents(parents));
        }
        kv("prior.phi_var", s.prior.phi_var.to_string());
        kv("prior.gamma_var", s.prior.gamma_var.to_string());
        kv("prior.dof", s.prior.dof.to_string());
        kv("prior.scale", s.prior.precision_scale.to_string());
        kv("mc.n_draws", s.n_draws.to_string());
        if let Some(f) = s.ess_floor {
            kv("mc.ess_floor", f.to_string());
        }
        kv("wdlm.delta", self.wdlm.delta.to_string());
        kv("wdlm.beta", self.wdlm.beta.to_string());
        kv("proposal.delta", self.proposal.delta.to_string());
        kv("proposal.beta", self.proposal.beta.to_string());
        kv("selection.enabled", self.selection_enabled.to_string());
        kv("selection.core_target", self.selection.core_target.to_string());
        kv("selection.warmup_span", self.selection.warmup_span.to_string());
        kv("selection.n_max", self.selection.n_max.to_string());
        kv("selection.new_parent_prior_var", self.selection.new_parent_prior_var.to_string());
        kv(
            "selection.eligible",
            match &self.selection.eligible {
                None => "all".into(),
                Some(e) => e.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
            },
        );
        kv("portfolio.cost_bp", self.cost_bp.to_string());
        kv(
            "portfolio.strategies",
            self.strategies.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(","),
        );
        kv("run.seed", self.seed.to_string());
        kv("run.entropy_window", self.entropy_window.to_string());
        out
    }
}

/// Settings of the synthetic data generator, read from the same flat format
/// under the `sim.` prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub n_series: usize,
    pub n_steps: usize,
    pub parents_per_series: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub volatility: f64,
    pub level: f64,
    pub level_drift_sd: f64,
    pub start_date: NaiveDate,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_series: 5,
            n_steps: 500,
            parents_per_series: 2,
            gamma_min: 0.3,
            gamma_max: 0.6,
            volatility: 0.01,
            level: 2e-4,
            level_drift_sd: 0.0,
            start_date: NaiveDate::from_ymd_opt(2003, 1, 2).expect("valid date"),
            seed: 1,
        }
    }
}

impl SimulationConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SimulationConfig::default();
        for (key, value, line) in parse_entries(text)? {
            cfg.set(&key, &value).map_err(|e| e.context(format!("config line {line}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading config {}", path.display())))?;
        SimulationConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "sim.n_series" => self.n_series = num(key, value)?,
            "sim.n_steps" => self.n_steps = num(key, value)?,
            "sim.parents_per_series" => self.parents_per_series = num(key, value)?,
            "sim.gamma_min" => self.gamma_min = num(key, value)?,
            "sim.gamma_max" => self.gamma_max = num(key, value)?,
            "sim.volatility" => self.volatility = num(key, value)?,
            "sim.level" => self.level = num(key, value)?,
            "sim.level_drift_sd" => self.level_drift_sd = num(key, value)?,
            "sim.start_date" => {
                self.start_date = NaiveDate::parse_from_str(value, super::data::DATE_FORMAT)
                    .map_err(|e| Error::Config(format!("sim.start_date '{value}': {e}")))?
            }
            "run.seed" | "sim.seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}

fn parse_entries(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: '{value}' is not a boolean"))),
    }
}

fn parse_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| num("list entry", s))
        .collect()
}

/// Parent lists per series separated by `;`, e.g. `1 2; 0; ` for three
/// series.
fn parse_parents(value: &str) -> Result<Vec<Vec<usize>>> {
    value.split(';').map(|group| parse_list(group.trim())).collect()
}

fn format_parents(parents: &[Vec<usize>]) -> String {
    parents
        .iter()
        .map(|ps| ps.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("; ")
}
