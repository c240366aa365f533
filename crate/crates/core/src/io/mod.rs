//! Persistence and ingestion: checkpoint archive, run configuration,
//! image files.

pub mod checkpoint;
pub mod config;
pub mod images;

pub use checkpoint::{load_checkpoint, save_checkpoint, ArchiveError, SpecSnapshot};
pub use config::RunConfig;
