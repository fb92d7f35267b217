//! Backtest harness: data ingestion, synthetic panels, the daily
//! forecast/trade/update loop, metrics and file export.

pub mod config;
pub mod data;
pub mod export;
pub mod filter;
pub mod ledger;
pub mod simulate;

pub use config::{ModelConfig, ModelKind, PriorSettings, Rule, SgdlmSettings, SimulationConfig, StrategySpec, WdlmSettings};
pub use data::{load_prices, read_prices, save_prices, write_prices, PanelView, ReturnsPanel};
pub use export::export;
pub use filter::{compute_predictor, run_filter};
pub use ledger::{annualize, metrics, BacktestLedger, DayRecord, LedgerSummary, StrategySummary};
pub use simulate::{simulate, SyntheticSpec, SyntheticTruth};
