//! Datasets, training, linear probing and the case-study driver.

mod config;
mod data;
mod probe;
mod report;
mod study;
mod train;

pub use config::{Branch, Designs, Side, TrainConfig};
pub use data::{
    cifar10_bytes, load_cifar10_binary, make_synthetic_dataset, nearest_template_accuracy,
    parse_cifar10_binary, write_cifar10_binary, DataKind, Dataset, DatasetSpec, Split,
    SyntheticParams, Template,
};
pub use probe::{binomial_ci95, features, linear_probe, LinearClassifier, ProbeOptions, ProbeResult};
pub use report::collate;
pub use study::{
    case_study, design_variance, paired_one_sided, run_one, study_variance, CellSummary, Design,
    Executor, PairedTest, RunRecord, StudyOptions, StudyReport, VarianceSummary, LADDER,
};
pub use train::{
    cosine_lr, metrics_jsonl, parse_metrics_jsonl, train, MetricsRecord, PendingStep, Trainer,
    TrainRun,
};
