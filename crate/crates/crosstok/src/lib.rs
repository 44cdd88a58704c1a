//! File formats, the experiment runner and the command line for
//! `crosstok-core`.

pub mod archive;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod experiment;
pub mod points_io;
pub mod pretrain;

pub use archive::{load_archive, read_archive, save_archive, Archive, ArchiveError};
pub use config::ExperimentConfig;
pub use experiment::{run_experiment, MetricRecord, RunOptions, RunSummary};
pub use points_io::{read_points, write_points, PointFormat};
