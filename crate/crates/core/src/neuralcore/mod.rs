//! Minimal reverse-mode differentiation engine and the layer set of the
//! classifier.

mod gradcheck;
mod layers;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, param_gradient_check, param_gradient_check_where, relative_error, ParamCheck};
pub use layers::{BatchNorm1d, Conv1d, Dropout, Linear, Lstm, Mode, ParamCount, SoftAttention};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use real::{dot, Real};
pub use tape::{BatchNormMode, BatchStats, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape {shape:?} needs {} values, got {len}", .shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: sequence length {len} is below the minimum {min}")]
    SequenceTooShort {
        op: &'static str,
        len: usize,
        min: usize,
    },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("parameter leaf requested on a tape without a parameter store")]
    NoParamStore,
    #[error("{0}")]
    InvalidArgument(String),
}
