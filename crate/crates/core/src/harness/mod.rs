//! Experiment orchestration: configuration, synthetic data, the assembled
//! model, training, checkpoints, parameter accounting, ablations and
//! diagnostics.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod model;
pub mod params;
pub mod train;

pub use ablation::{run_ablation, suite_registry, AblationReport, AblationRow, Suite};
pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, LayerSet, ProjInit};
pub use data::{generate_dataset, Pair, SyntheticDataset, LATENT_DIM};
pub use diagnostics::{attention_map, export_diagnostics, singular_values};
pub use model::{backbone_hash, Model};
pub use params::{count_params, ParamCounts};
pub use train::{evaluate_model, learning_rate, train, train_model, Adam, EpochLog, Evaluation, TrainOutcome};
