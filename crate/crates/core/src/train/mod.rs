//! Run orchestration: configuration, supervised warm-start, preference
//! training, checkpoints, ablation grids and attention export.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod heatmap;
pub mod optim;
pub mod pretrain;
pub mod run;

pub use ablate::{ablate, named_grid, AblationResult, AblationRow, SummaryRow, Variant};
pub use checkpoint::Checkpoint;
pub use config::{OptimizerConfig, OptimizerKind, PretrainConfig, RunConfig};
pub use heatmap::{export_heatmap, heatmap_csv};
pub use optim::Optimizer;
pub use pretrain::{mean_gradient, pretrain};
pub use run::{prepare_seed, train, train_preference, write_run, RunRecord, SeedInputs, StepLog};
