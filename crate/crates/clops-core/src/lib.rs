//! Probabilistic time-series forecasting toolkit for cluster operations
//! traces: trace ETL, feature pipeline, Transformer forecasting variants with
//! probabilistic heads, pre-training with zero-shot / fine-tune adaptation,
//! and a rolling-window evaluation suite.

pub mod elem;
pub mod error;
pub mod etl;
pub mod eval;
pub mod features;
pub mod harness;
pub mod heads;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod util;

pub use elem::Elem;
pub use error::{Error, Result};
