use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ModelKind, ParamReport};

pub const REPORT_SCHEMA: &str = "mewehv.report/1";

/// Classification results on one split. `confusion[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub clips: usize,
    pub accuracy: f64,
    pub mean_nll: f64,
    /// `None` for classes without support in the split.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
}

impl SplitMetrics {
    /// `outcomes` holds `(label, predicted, nll)` per clip.
    pub fn from_outcomes(classes: usize, outcomes: &[(usize, usize, f64)]) -> Self {
        let mut confusion = vec![vec![0usize; classes]; classes];
        let mut nll = 0.0;
        for &(label, pred, l) in outcomes {
            confusion[label][pred] += 1;
            nll += l;
        }
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let support: usize = row.iter().sum();
                (support > 0).then(|| row[i] as f64 / support as f64)
            })
            .collect();
        let n = outcomes.len();
        Self {
            clips: n,
            accuracy: accuracy_of(&confusion),
            mean_nll: if n == 0 { 0.0 } else { nll / n as f64 },
            per_class_accuracy,
            confusion,
        }
    }

    pub fn support(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }
}

/// `trace / sum`, 0 for an empty matrix.
pub fn accuracy_of(confusion: &[Vec<usize>]) -> f64 {
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let trace: usize = confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
    trace as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub train_nll: Option<f64>,
    pub train_center: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: f64,
    pub val_nll: f64,
}

/// The settings that determine a run's numbers. Holds no file locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub task: String,
    pub encoder: String,
    pub encoder_seed: u64,
    pub width: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub loss_mode: String,
    pub lr: f64,
    pub clip_norm: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_seconds: f64,
    pub cap_per_class: Option<usize>,
    pub target_val_accuracy: Option<f64>,
    pub speaker_disjoint: bool,
    pub precision: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub dataset: String,
    pub kind: ModelKind,
    /// Absent for reports produced by evaluating a checkpoint.
    pub run: Option<RunSettings>,
    pub labels: Vec<String>,
    pub params: ParamReport,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub splits: BTreeMap<String, SplitMetrics>,
    pub workers: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Accuracy on the test split if evaluated, else validation, else the
    /// single split of a checkpoint evaluation.
    pub fn headline_accuracy(&self) -> Option<f64> {
        ["test", "val", "eval"]
            .iter()
            .find_map(|k| self.splits.get(*k))
            .map(|m| m.accuracy)
    }
}

/// Wall-clock measurements, kept apart from the deterministic report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub total_s: f64,
    pub epoch_s: Vec<f64>,
    pub final_eval_s: f64,
    pub workers: usize,
}
