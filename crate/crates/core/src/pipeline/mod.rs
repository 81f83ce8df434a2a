//! Staged training, evaluation and gradient checking.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{load_config, parse_config, ModelConfig, TrainConfig};
pub use evaluate::{evaluate, EvalConfig, EvalReport};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, LossId};
pub use optim::{group_params, lr_schedule, AdamW, ParamGroups};
pub use train::{train_stage, Corpus, LossTrace, StageOutput, StructureMixer};
