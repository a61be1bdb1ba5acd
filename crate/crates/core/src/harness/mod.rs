//! Config-driven training and evaluation, run reports, the synthetic fusion
//! dataset and result tables.

mod config;
mod data;
mod metrics;
mod table;
mod toy;
mod train;

use std::path::PathBuf;

pub use config::{EncoderKind, ExperimentConfig, Precision, Task, CONFIG_KEYS};
pub use data::{check_leakage, FeaturePipeline, Features, LabelSet, Split};
pub use metrics::{EpochRecord, MetricsReport, RunSettings, SplitMetrics, TimingReport, REPORT_SCHEMA};
pub use table::{build_table, collect_reports, parse_table, ReportTable, TableCell, TableRow, TIE_DECIMALS};
pub use toy::{make_toy_fusion_dataset, toy_clip, ToyClipParams, ToyDataset, TOY_CLASSES, TOY_HOP};
pub use train::{evaluate, evaluate_split, train, TrainOutcome, REPORT_FILE, TIMING_FILE};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Nn(#[from] crate::neuralcore::NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("split leakage: {0}")]
    Leakage(String),
    #[error("label {label:?} in the {split} split does not occur in training")]
    UnknownLabel { label: String, split: String },
    #[error("config says {expected} classes but the training manifest has {found}")]
    ClassCount { expected: usize, found: usize },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("the {0} split is empty")]
    EmptySplit(String),
    #[error("no report.json found under {0}")]
    NoReports(PathBuf),
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}
