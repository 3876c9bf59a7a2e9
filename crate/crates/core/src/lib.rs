pub mod distill;
pub mod eval;
pub mod models;
pub mod numeric;
pub mod runner;
pub mod seed;
pub mod synthlang;
pub mod tokenize;
pub mod train;

/// Any failure surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] numeric::NumericError),
    #[error(transparent)]
    Synth(#[from] synthlang::SynthError),
    #[error(transparent)]
    Tokenize(#[from] tokenize::TokenizeError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Distill(#[from] distill::DistillError),
    #[error("{0}")]
    Invalid(String),
    /// Labels of an unannotated split were read.
    #[error("label gate: {0}")]
    GateViolation(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the failure is a blocked or forbidden label read.
    pub fn is_label_gate(&self) -> bool {
        match self {
            Error::Synth(synthlang::SynthError::LabelGate(_)) | Error::GateViolation(_) => true,
            Error::Stage { source, .. } => source.is_label_gate(),
            _ => false,
        }
    }
}

/// Attach a stage name to an error.
pub(crate) fn in_stage<E: Into<Error>>(stage: impl Into<String>) -> impl FnOnce(E) -> Error {
    let stage = stage.into();
    move |e| Error::Stage {
        stage,
        source: Box::new(e.into()),
    }
}
