//! File formats, configuration, report rendering and the experiment commands
//! behind the `vfflab` binary. All numerics live in `vfflab_core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod report;

pub use commands::{cmd_dynamics, cmd_reproduce_matrix, cmd_train_gridworld, cmd_train_matrix};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use report::render_payoff_table;
