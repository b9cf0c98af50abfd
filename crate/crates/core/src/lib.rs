//! Traffic forecasting on road graphs.
//!
//! A road network is modeled as a directed graph whose *nodes are road
//! segments*; an edge connects two segments when a vehicle can move from one
//! onto the other. Each node carries a static attribute record and two
//! five-minute time series (speed, which can have gaps, and volume, which
//! cannot). The crate provides:
//!
//! * [`graph`]: CSR storage for the segment graph plus loaders and degree
//!   statistics,
//! * [`series`]: aligned time-series storage, chronological splits and
//!   sliding-window batching,
//! * [`featurize`]: turning raw history, static attributes, calendar fields
//!   and learned node embeddings into flat model inputs,
//! * [`numerics`]: a small tensor type with tape-based reverse-mode
//!   differentiation and an AdamW optimizer,
//! * [`models`]: naive forecasters, a linear baseline and the
//!   time-then-graph GNN forecaster (history is collapsed per node first,
//!   then propagated over the graph, so per-layer activations are
//!   independent of the lookback length),
//! * [`train`]: masked-MAE training and evaluation loops, multi-seed suites
//!   and reports,
//! * [`synth`]: a deterministic synthetic city generator used for benchmarks
//!   and tests.

pub mod error;
pub mod featurize;
pub mod graph;
pub mod models;
pub mod numerics;
pub mod series;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
