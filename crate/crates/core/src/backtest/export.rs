//! CSV and text outputs of a backtest run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::data::DATE_FORMAT;
use super::ledger::{standardize_trailing, BacktestLedger};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const VALUES_FILE: &str = "portfolio_values.csv";
pub const ENTROPY_FILE: &str = "entropy.csv";
pub const MEMBERSHIP_FILE: &str = "parental_membership.csv";
pub const CHURN_FILE: &str = "churn.csv";
pub const REPORT_FILE: &str = "run_report.txt";

/// The five CSV outputs.
pub const CSV_FILES: [&str; 5] = [METRICS_FILE, VALUES_FILE, ENTROPY_FILE, MEMBERSHIP_FILE, CHURN_FILE];

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        v.to_string()
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Write all outputs into `out_dir`, creating it if needed.
pub fn export(ledger: &BacktestLedger, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::from(e).context(format!("creating output directory {}", out_dir.display())))?;
    let dates: Vec<String> = ledger.rows.iter().map(|r| r.date.format(DATE_FORMAT).to_string()).collect();

    let mut metric_rows = Vec::new();
    if !ledger.rows.is_empty() {
        let s = &ledger.summary;
        let model = |name: &str, v: f64| vec!["model".to_string(), name.to_string(), num(v)];
        metric_rows.push(model("n_steps", s.n_steps as f64));
        metric_rows.push(model("log_likelihood", s.log_likelihood));
        metric_rows.push(model("mad", s.mad));
        metric_rows.push(model("coverage_90", s.coverage_90));
        for st in &s.strategies {
            for (name, v) in [
                ("annual_return", st.annual_return),
                ("annual_volatility", st.annual_volatility),
                ("sharpe", st.sharpe),
                ("final_value", st.final_value),
                ("active_days", st.active_days as f64),
                ("ruined", if st.ruined { 1.0 } else { 0.0 }),
            ] {
                metric_rows.push(vec![st.name.clone(), name.to_string(), num(v)]);
            }
        }
    }
    write_csv(&out_dir.join(METRICS_FILE), &["scope", "metric", "value"], metric_rows)?;

    let mut header = vec!["date"];
    header.extend(ledger.strategy_names.iter().map(String::as_str));
    let values: Vec<Vec<f64>> = (0..ledger.strategy_names.len()).map(|s| ledger.values(s)).collect();
    write_csv(
        &out_dir.join(VALUES_FILE),
        &header,
        (0..ledger.rows.len()).map(|t| {
            let mut row = vec![dates[t].clone()];
            row.extend(values.iter().map(|v| num(v[t])));
            row
        }),
    )?;

    let entropy: Vec<(usize, f64, f64)> = ledger
        .rows
        .iter()
        .enumerate()
        .filter_map(|(t, r)| r.entropy.map(|e| (t, e.raw, e.value)))
        .collect();
    let clamped: Vec<f64> = entropy.iter().map(|e| e.2).collect();
    let standardized = standardize_trailing(&clamped, ledger.entropy_window);
    write_csv(
        &out_dir.join(ENTROPY_FILE),
        &["date", "raw", "entropy", "standardized", "ess"],
        entropy.iter().zip(&standardized).map(|(&(t, raw, value), z)| {
            vec![
                dates[t].clone(),
                num(raw),
                num(value),
                z.map_or(String::new(), num),
                ledger.rows[t].ess.map_or(String::new(), num),
            ]
        }),
    )?;

    let mut membership = Vec::new();
    let mut churn = Vec::new();
    for (t, r) in ledger.rows.iter().enumerate() {
        let Some(sel) = &r.selection else { continue };
        for (j, parents) in sel.membership.iter().enumerate() {
            for &(k, state) in parents {
                membership.push(vec![
                    dates[t].clone(),
                    ledger.series_ids[j].clone(),
                    ledger.series_ids[k].clone(),
                    state.label().to_string(),
                ]);
            }
        }
        churn.push(vec![
            dates[t].clone(),
            num(sel.core_churn),
            sel.promoted.to_string(),
            sel.demoted.to_string(),
            sel.removed.to_string(),
            sel.admitted.to_string(),
        ]);
    }
    write_csv(&out_dir.join(MEMBERSHIP_FILE), &["date", "series", "parent", "state"], membership)?;
    write_csv(
        &out_dir.join(CHURN_FILE),
        &["date", "core_churn", "promoted", "demoted", "removed", "admitted"],
        churn,
    )?;

    fs::write(out_dir.join(REPORT_FILE), run_report(ledger))?;
    Ok(())
}

/// Plain-text summary: configuration echo, headline metrics and counts of
/// numerical events.
pub fn run_report(ledger: &BacktestLedger) -> String {
    let mut out = String::new();
    let s = &ledger.summary;
    let d = &ledger.diagnostics;
    let _ = writeln!(out, "[config]");
    out.push_str(&ledger.config_echo);
    let _ = writeln!(out, "\n[run]");
    let _ = writeln!(out, "seed = {}", ledger.seed);
    let _ = writeln!(out, "\n[data]");
    let _ = writeln!(out, "series = {}", ledger.series_ids.len());
    let _ = writeln!(out, "steps = {}", s.n_steps);
    if let (Some(first), Some(last)) = (ledger.rows.first(), ledger.rows.last()) {
        let _ = writeln!(out, "first_date = {}", first.date.format(DATE_FORMAT));
        let _ = writeln!(out, "last_date = {}", last.date.format(DATE_FORMAT));
    }
    let _ = writeln!(out, "\n[forecast]");
    let _ = writeln!(out, "log_likelihood = {}", num(s.log_likelihood));
    let _ = writeln!(out, "mad = {}", num(s.mad));
    let _ = writeln!(out, "coverage_90 = {}", num(s.coverage_90));
    let _ = writeln!(out, "\n[portfolios]");
    for st in &s.strategies {
        let _ = writeln!(
            out,
            "{} return = {} volatility = {} sharpe = {} final_value = {}{}",
            st.name,
            num(st.annual_return),
            num(st.annual_volatility),
            num(st.sharpe),
            num(st.final_value),
            if st.ruined { " RUINED" } else { "" }
        );
    }
    let _ = writeln!(out, "\n[warnings]");
    for (name, v) in [
        ("psd_repairs", d.psd_repairs),
        ("ess_floor_hits", d.ess_floor_hits),
        ("determinant_sign_changes", d.sign_changes),
        ("singular_posterior_draws", d.singular_draws),
        ("dropped_forecast_draws", d.dropped_forecast_draws),
        ("dof_fallbacks", d.dof_fallbacks),
        ("vb_ridges", d.vb_ridges),
        ("proposal_ridges", d.proposal_ridges),
        ("degenerate_entropy", d.degenerate_entropy),
        ("degenerate_portfolios", d.degenerate_portfolios),
    ] {
        let _ = writeln!(out, "{name} = {v}");
    }
    for (name, date) in &d.ruins {
        let _ = writeln!(out, "ruin = {name} {}", date.format(DATE_FORMAT));
    }
    out
}
