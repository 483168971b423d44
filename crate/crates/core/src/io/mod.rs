//! Checkpoints, CSV tables, experiment configs and result files.

pub mod checkpoint;
pub mod config;
pub mod results;
pub mod tabular;

pub use checkpoint::{
    load_base, load_tangent, save_base, save_tangent, CheckpointKind, CheckpointMeta,
};
pub use config::{ExperimentConfig, Overrides};
pub use results::{read_results, write_results, ResultRow};
pub use tabular::{load_csv_dataset, load_csv_split, CsvSchema};
