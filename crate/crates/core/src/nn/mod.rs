//! Dense tensors, a recording tape for reverse-mode gradients, and the LSTM
//! building blocks of the classifier.

mod lstm;
mod tape;
mod tensor;

pub use lstm::{LSTM_PARAM_NAMES, bilstm_forward, bilstm_tape, lstm_step, lstm_step_traced, linear, LstmCellParams, LstmGates, LstmLeaves, LstmState};
pub use tape::{bce_term, Gradients, Tape, Var, BCE_CLAMP};
pub use tensor::{sigmoid, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("data length {len} does not fit shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("{op}: range {start}+{len} exceeds extent {extent}")]
    Range { op: &'static str, start: usize, len: usize, extent: usize },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

impl NnError {
    pub(crate) fn shape(op: &'static str, a: &Tensor, b: &Tensor) -> Self {
        NnError::Shape { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
    }
}
