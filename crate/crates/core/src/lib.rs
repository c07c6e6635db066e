//! Spatio-temporal graph network for traffic speed forecasting.
//!
//! Each forecast combines two branches over a window of `T` timestamps:
//! one reads the current speeds, the other the same time of day over the
//! previous `P` days. Both aggregate exact-k-hop neighborhoods of a
//! distance-kernel sensor graph, carry information forward in time, and
//! add a daily/weekly positional signal. A small head maps the concatenated
//! embeddings to the next `n_out` steps. Gradients come from a reverse-mode
//! tape in [`numcore`]; nothing depends on an external ML framework.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod numcore;
pub mod train;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use config::{Prepared, Preset, RunConfig};
pub use data::{Normalizer, SampleWindow, SpeedSeries, WindowSet, WindowSpec};
pub use encoding::PositionalEncoder;
pub use error::{Error, Result};
pub use graph::{HopNeighborhoods, SensorGraph};
pub use model::{Batch, Branches, ModelConfig, SstGnn};
pub use train::{TrainConfig, Trainer};
