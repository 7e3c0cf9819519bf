//! Shared error type for the library.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by how a
//! caller should react: bad arguments, numeric failure, malformed bytes,
//! missing upstream artifacts, or a plan/simulation disagreement.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates the operation's contract
    /// (incompatible shapes, out-of-range indices, empty inputs, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at epoch {epoch}, batch {batch} (loss not finite)")]
    TrainingDiverged { epoch: usize, batch: usize },

    /// Stored bytes (model file, profile table, catalog index) could not be
    /// parsed. `what` names the artifact kind.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// An encoded feature blob failed a decode stage.
    #[error("blob decode failed at {stage} stage: {detail}")]
    Decode { stage: &'static str, detail: String },

    /// An artifact required by this operation has not been produced yet.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    /// A simulated run disagreed with its plan beyond tolerance.
    #[error(
        "plan validation failed on {component}: planned {planned:.9}, \
         simulated {simulated:.9}, relative error {relative:.3e} > {tolerance:.3e}"
    )]
    Validation {
        component: &'static str,
        planned: f64,
        simulated: f64,
        relative: f64,
        tolerance: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for [`Error::InvalidInput`] built from format arguments.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
