// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid mask: no selectable entries")]
    InvalidMask,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("token id {token} out of vocabulary (size {vocab})")]
    Vocab { token: usize, vocab: usize },

    #[error("feature index {index} out of range (dictionary size {d_dict})")]
    ActionRange { index: usize, d_dict: usize },

    #[error("mask owned by sample {owner} updated from sample {got}")]
    MaskOwnership { owner: usize, got: usize },

    #[error("coefficient calibration unavailable: {0}")]
    CalibrationUnavailable(String),

    #[error("planted task construction failed after {attempts} attempts (best flip coverage {best_coverage:.3})")]
    ConstructionFailed { attempts: usize, best_coverage: f64 },

    #[error("sample sets differ: {0}")]
    SampleMismatch(String),

    #[error("intervention record for sample {0} has no outcome category")]
    OrphanRecord(usize),

    #[error("prompt mismatch in trace pair {0}")]
    PromptMismatch(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    ConfigInvalid(Vec<String>),

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line: 2 config, 3 task/oracle, 4 divergence, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse { .. } | Error::ConfigInvalid(_) => 2,
            Error::ConstructionFailed { .. }
            | Error::CalibrationUnavailable(_)
            | Error::SampleMismatch(_)
            | Error::PromptMismatch(_)
            | Error::OrphanRecord(_) => 3,
            Error::Divergence(_) => 4,
            _ => 1,
        }
    }

    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidMask => "invalid_mask",
            Error::Divergence(_) => "divergence",
            Error::Vocab { .. } => "vocab",
            Error::ActionRange { .. } => "action_range",
            Error::MaskOwnership { .. } => "mask_ownership",
            Error::CalibrationUnavailable(_) => "calibration_unavailable",
            Error::ConstructionFailed { .. } => "construction_failed",
            Error::SampleMismatch(_) => "sample_mismatch",
            Error::OrphanRecord(_) => "orphan_record",
            Error::PromptMismatch(_) => "prompt_mismatch",
            Error::Invalid(_) => "invalid_argument",
            Error::ConfigParse { .. } => "config_parse",
            Error::ConfigInvalid(_) => "config_invalid",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
