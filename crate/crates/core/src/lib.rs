//! Sequential Bayesian forecasting with simultaneous graphical dynamic linear
//! models (SGDLMs).
//!
//! The crate is organised bottom-up:
//!
//! * [`dlm`] holds the univariate normal/gamma DLM recursions that every
//!   series runs independently.
//! * [`engine`] couples the series: Monte Carlo forecasting, importance
//!   recoupling of the joint posterior and variational decoupling back into
//!   independent normal/gammas.
//! * [`selection`] revises the simultaneous parental sets over time.
//! * [`wdlm`] is the matrix-normal/inverse-Wishart benchmark model, also used
//!   as the proposal model for parental selection.
//! * [`portfolio`] contains the equality-constrained mean-variance rules.
//! * [`backtest`] wires everything into a daily filter/decision loop with
//!   CSV input and output.

pub mod backtest;
pub mod dlm;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod portfolio;
pub mod rng;
pub mod selection;
pub mod wdlm;

pub use error::{Error, ErrorKind, Result};
