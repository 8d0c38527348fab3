//! Configuration, data files, metrics and the train/evaluate/predict/pretrain
//! loops.

pub mod config;
pub mod data;
pub mod metrics;
pub mod pretraining;
pub mod task;
pub mod train;

pub use config::{RunConfig, Task, SEED_ENV};
pub use pretraining::{pretrain, pretrain_on, uniform_matching_loss, PretrainReport, StepLosses, PRETRAINED_DIR};
pub use task::{Example, LabelSet, Prediction, Target, TaskHead, TaskModel};
pub use train::{
    evaluate, predict_sentences, predict_text, train, train_on, train_seeds, EpochRecord, Metrics, SeedSummary,
    TaskData, TrainReport, BEST_DIR, REPORT_FILE,
};
