//! Configuration, training runs, grid search and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod grid;
pub mod reference;
pub mod train;

pub use config::{DataSource, GridCell, GridSpace, TrainConfig};
pub use grid::{grid_search, GridOutput, GridSummary};
pub use train::{evaluate, train_run, RunRecord};
