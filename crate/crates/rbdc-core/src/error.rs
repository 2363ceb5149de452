//! Error type shared across the crate.
//!
//! Every fallible operation returns [`Result`]. Variants carry enough
//! context to name the offending tensor, record, or training step, so
//! callers (and the CLI) can surface actionable messages without
//! re-deriving state.

use std::fmt;

/// Crate-wide error enum.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes (or layouts) do not conform for the requested op.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// Operands carry different numeric precisions.
    PrecisionMismatch {
        op: &'static str,
    },
    /// An operation produced a NaN or infinity.
    NonFinite {
        op: String,
    },
    /// Gradient tape was already consumed by a previous backward pass.
    TapeConsumed,
    /// Backward was requested from a non-scalar node.
    NotScalar {
        op: &'static str,
        shape: Vec<usize>,
    },
    /// A model specification is internally inconsistent.
    InvalidSpec {
        detail: String,
    },
    /// An object is in the wrong state for the requested operation
    /// (e.g. eval-mode batch norm before any statistics were tracked).
    State {
        detail: String,
    },
    /// A serialized artifact is malformed. `record` names the offending
    /// entry when one can be identified.
    Format {
        record: Option<String>,
        detail: String,
    },
    /// A coupling rule was applied to tensors it does not accept.
    Rule {
        role: String,
        detail: String,
    },
    /// Two checkpoints cannot be coupled or verified together.
    Incompatible {
        detail: String,
    },
    /// A budget or plan parameter is outside its domain.
    Domain {
        detail: String,
    },
    /// Verification was refused before any audit ran (bad lineage, wrong
    /// shapes); distinct from an audit that ran and failed.
    VerificationRefused {
        detail: String,
    },
    /// Training aborted; `epoch` and `batch` locate the failing step.
    Training {
        epoch: u64,
        batch: usize,
        detail: String,
    },
    /// Underlying I/O failure.
    Io {
        detail: String,
    },
    /// JSON (de)serialization failure.
    Json {
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            Error::PrecisionMismatch { op } => {
                write!(f, "operands of {op} have different precisions")
            }
            Error::NonFinite { op } => {
                write!(f, "non-finite value produced by {op}")
            }
            Error::TapeConsumed => write!(f, "gradient tape already consumed"),
            Error::NotScalar { op, shape } => {
                write!(f, "{op} requires a scalar, got shape {shape:?}")
            }
            Error::InvalidSpec { detail } => write!(f, "invalid model spec: {detail}"),
            Error::State { detail } => write!(f, "invalid state: {detail}"),
            Error::Format { record, detail } => match record {
                Some(name) => write!(f, "format error at record `{name}`: {detail}"),
                None => write!(f, "format error: {detail}"),
            },
            Error::Rule { role, detail } => {
                write!(f, "coupling rule for role `{role}` rejected input: {detail}")
            }
            Error::Incompatible { detail } => write!(f, "incompatible checkpoints: {detail}"),
            Error::Domain { detail } => write!(f, "parameter out of domain: {detail}"),
            Error::VerificationRefused { detail } => {
                write!(f, "verification refused: {detail}")
            }
            Error::Training { epoch, batch, detail } => {
                write!(f, "training failed at epoch {epoch}, batch {batch}: {detail}")
            }
            Error::Io { detail } => write!(f, "io error: {detail}"),
            Error::Json { detail } => write!(f, "json error: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { detail: e.to_string() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json { detail: e.to_string() }
    }
}
