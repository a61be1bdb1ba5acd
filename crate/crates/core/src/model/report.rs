use serde::{Deserialize, Serialize};

use super::Model;
use crate::neuralcore::{ParamCount, ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub block: String,
    pub layer: String,
    /// Trainable parameters attributed to the row. Linear rows count weights
    /// only; their biases are reported separately.
    pub count: usize,
}

/// Per-layer trainable parameter counts, plus the linear biases and class
/// centers that the layer rows leave out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub linear_biases: usize,
    pub centers: usize,
    pub total: usize,
}

impl ParamReport {
    pub(super) fn new<F: Real>(model: &Model, store: &ParamStore<F>) -> Self {
        let mut rows = Vec::new();
        let mut row = |block: &str, layer: &str, count: usize| {
            rows.push(ParamRow {
                block: block.into(),
                layer: layer.into(),
                count,
            })
        };
        if let Some(b) = &model.mfcc_branch {
            for (conv, bn) in &b.convs {
                row("B1", "Conv1d", conv.param_count());
                row("B1", "BatchNorm1d", bn.param_count());
            }
            row("L1", "LSTM", b.lstm.param_count());
            row("A1", "SoftAttention", b.attention.param_count());
        }
        if let Some(b) = &model.wave_branch {
            row("L2", "LSTM", b.lstm.param_count());
            row("A2", "SoftAttention", b.attention.param_count());
        }
        let h = &model.head;
        row("D", "Linear", h.fc1.weight_count());
        row("D", "Linear", h.fc2.weight_count());
        let linear_biases = h.fc1.out_features + h.fc2.out_features;
        let centers = store.value(model.centers).len();
        let total = rows.iter().map(|r| r.count).sum::<usize>() + linear_biases + centers;
        debug_assert_eq!(total, store.trainable_count());
        Self {
            rows,
            linear_biases,
            centers,
            total,
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.count).collect()
    }
}
