//! Semi-supervised time-series anomaly detection.
//!
//! A deep Q-network with an LSTM body learns to flag anomalous windows of a
//! univariate series from a small budget of human labels. The pipeline is:
//!
//! 1. [`timeseries`]: min-max scaling, sliding-window segmentation and a
//!    chronological train/test split.
//! 2. [`iforest`]: an isolation forest ranks the training windows and picks
//!    the most anomalous, most normal and most ambiguous ones as seeds.
//! 3. [`labelprop`]: label propagation spreads human labels over similar
//!    windows, producing entropy-gated pseudo-labels.
//! 4. [`agent`] and [`neural`]: DQN training over labeled windows.
//! 5. [`active`]: margin sampling queries the windows the agent is least
//!    decided about.
//!
//! [`orchestrator`] wires these into reproducible training runs, and [`eval`]
//! computes point-wise precision, recall and F1.

pub mod active;
pub mod agent;
pub mod error;
pub mod eval;
pub mod iforest;
pub mod labelprop;
pub mod neural;
pub mod orchestrator;
pub mod timeseries;

pub use error::{Error, Result};
