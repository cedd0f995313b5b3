//! Optimization harness: configuration, the training loop, checkpoints,
//! metrics and ablation runs.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod trainer;

pub use ablation::{parse_variants, run_ablation, AblationReport, Variant};
pub use checkpoint::Checkpoint;
pub use config::{LossKind, TrainConfig};
pub use metrics::{read_metrics, MetricsWriter, StepRecord};
pub use trainer::{build_suite, checkpoint_path, resume, train, Trainer, TrainOutcome};
