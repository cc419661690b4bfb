//! Dataset ingestion, stratified splitting, training, evaluation and
//! reporting.

pub mod checkpoint;
pub mod history;
pub mod manifest;
pub mod metrics;
pub mod split;
pub mod synth;
pub mod train;

pub use checkpoint::{load_classifier, load_params, save_classifier, save_params};
pub use history::{export_history, read_history, EpochRecord, TrainHistory};
pub use manifest::{class_stats, load_manifest, ClassStats, DatasetManifest, Record, FUNDUS_COUNTS};
pub use metrics::{classification_report, ClassMetrics, ClassReport, ConfusionMatrix};
pub use split::{apportion, stratified_split, SplitAssignment, SplitFractions, Subset};
pub use train::{
    accuracy, evaluate, inject_synthetic, injection_counts, load_records, load_subset, train_classifier,
    validation_loss, ImageLoader, LabeledImages, TrainConfig, TrainHooks, TrainOutcome,
};
