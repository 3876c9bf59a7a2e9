//! Dense tensors, a reverse-mode tape and finite-difference gradient checks.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, primitive_gradient_checks, GradCheckReport, PrimitiveCheck, DEFAULT_STEP};
pub use graph::{softmax_in_place, Graph, Var, LOG_FLOOR};
pub use params::{ParamStore, Session};
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
}

impl NumericError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        NumericError::Shape { op, detail }
    }
}
