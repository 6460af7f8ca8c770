//! File formats and run configuration: netpbm images, binary model
//! checkpoints, and the flat `key = value` experiment config.

pub mod checkpoint;
pub mod config;
pub mod pnm;

pub use checkpoint::{load_model, read_checkpoint, save_model, write_checkpoint, TrainedModel};
pub use config::RunConfig;
