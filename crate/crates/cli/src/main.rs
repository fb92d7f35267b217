//! `sgdlm` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 input/config/data error,
//! 3 numerical failure. Failures print a single `error kind=... :` line on
//! stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sgdlm::backtest::{self, export, ModelConfig, SimulationConfig, SyntheticSpec};
use sgdlm::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "sgdlm", version, about = "Simultaneous graphical DLM forecasting and portfolio backtests")]
struct Cli {
    /// Worker threads for the Monte Carlo stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic price panel from a sparse simultaneous structure.
    Simulate(SimulateArgs),
    /// Run the daily forecast/trade loop on a price file and export results.
    Backtest(BacktestArgs),
    /// Summarise the metrics of a finished backtest.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation settings (`sim.*` keys); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output prices CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BacktestArgs {
    /// Model configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (M1-M5, MA1-MA5, W1-W5); wins over a preset key in the file.
    #[arg(long)]
    preset: Option<String>,
    /// Prices CSV: a date column followed by one column per series.
    #[arg(long)]
    prices: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `run.seed` for the Monte Carlo streams.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `backtest`.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error kind=usage: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error kind=usage: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Backtest(args) => run_backtest(args),
        Command::Report(args) => report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.kind() {
                ErrorKind::Input => ("input", 2),
                ErrorKind::Numerical => ("numerical", 3),
            };
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={kind}: {message}");
            ExitCode::from(code)
        }
    }
}

fn read_text(path: &Path, what: &str) -> sgdlm::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {what} {}", path.display())))
}

fn simulate(args: SimulateArgs) -> sgdlm::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => SimulationConfig::parse(&read_text(path, "config")?)?,
        None => SimulationConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let spec = SyntheticSpec::ring(&cfg)?;
    let (panel, truth) = backtest::simulate(&spec)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))?;
    }
    backtest::save_prices(&panel, 100.0, &args.out)?;
    let parents: Vec<String> = truth
        .parents()
        .iter()
        .map(|p| p.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "))
        .collect();
    log::info!("true parents: {}", parents.join("; "));
    println!("wrote {} ({} series x {} days)", args.out.display(), panel.n_series(), panel.n_steps());
    Ok(())
}

fn run_backtest(args: BacktestArgs) -> sgdlm::Result<()> {
    let file = match &args.config {
        Some(path) => read_text(path, "config")?,
        None => String::new(),
    };
    let text = match &args.preset {
        Some(p) => format!("preset = {p}\n{file}"),
        None => file,
    };
    let mut cfg = ModelConfig::parse(&text)?;
    let echo = cfg.echo();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let panel = backtest::load_prices(&args.prices)
        .map_err(|e| e.context(format!("loading prices {}", args.prices.display())))?;
    let mut ledger = backtest::run_filter(&panel, &cfg)?;
    ledger.config_echo = echo;
    backtest::export(&ledger, &args.out)?;

    let s = &ledger.summary;
    println!(
        "{} days, {} series: log-likelihood {:.3}, MAD {:.3e}, 90% coverage {:.3}",
        s.n_steps,
        ledger.series_ids.len(),
        s.log_likelihood,
        s.mad,
        s.coverage_90
    );
    println!("results in {}", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> sgdlm::Result<()> {
    let path = args.out.join(export::METRICS_FILE);
    let text = read_text(&path, "metrics")?;
    let mut lines = text.lines();
    if lines.next() != Some("scope,metric,value") {
        return Err(Error::Config(format!("{} is not a metrics file", path.display())));
    }
    let mut model = Vec::new();
    let mut strategies: Vec<(String, Vec<(String, String)>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let [scope, metric, value] = fields[..] else {
            return Err(Error::Data {
                row: i + 2,
                column: fields.len(),
                detail: "expected three fields".into(),
            });
        };
        if scope == "model" {
            model.push((metric.to_string(), value.to_string()));
        } else {
            match strategies.iter_mut().find(|(name, _)| name == scope) {
                Some((_, m)) => m.push((metric.to_string(), value.to_string())),
                None => strategies.push((scope.to_string(), vec![(metric.to_string(), value.to_string())])),
            }
        }
    }
    if model.is_empty() {
        println!("no forecast days recorded");
        return Ok(());
    }
    for (metric, value) in &model {
        println!("{metric:<16} {value}");
    }
    println!();
    let columns = ["annual_return", "annual_volatility", "sharpe", "final_value"];
    println!("{:<10} {:>14} {:>14} {:>10} {:>14}", "strategy", "return", "volatility", "sharpe", "final value");
    for (name, metrics) in &strategies {
        let get = |k: &str| {
            metrics
                .iter()
                .find(|(m, _)| m == k)
                .and_then(|(_, v)| v.parse::<f64>().ok())
                .unwrap_or(f64::NAN)
        };
        let ruined = get("ruined") == 1.0;
        let [r, v, s, f] = columns.map(get);
        println!(
            "{name:<10} {r:>14.4} {v:>14.4} {s:>10.3} {f:>14.2}{}",
            if ruined { "  ruined" } else { "" }
        );
    }
    Ok(())
}
