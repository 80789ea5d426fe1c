use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient tissue in slide `{slide_id}`: {found} foreground pixels, need at least {required}")]
    InsufficientTissue {
        slide_id: String,
        found: usize,
        required: usize,
    },

    #[error("degenerate stain in slide `{slide_id}`: angular spread {spread_deg:.4} deg is below 1 deg (single-stain slide?)")]
    DegenerateStain { slide_id: String, spread_deg: f64 },

    #[error("ill-conditioned stain basis: |cos(v_h, v_e)| = {cos:.12}")]
    Conditioning { cos: f64 },

    #[error("invalid stain basis: {0}")]
    InvalidBasis(String),

    #[error("basis/image mismatch: {0}")]
    BasisMismatch(String),

    #[error("annotation error in polygon {index}: {reason}")]
    Annotation { index: usize, reason: String },

    #[error("malformed annotation file: {0}")]
    AnnotationFile(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite activation in layer `{layer}`")]
    NumericFault { layer: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable kind, used for `--json-errors` diagnostics.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::InvalidInput(_) => "invalid_input",
            Error::InsufficientTissue { .. } => "insufficient_tissue",
            Error::DegenerateStain { .. } => "degenerate_stain",
            Error::Conditioning { .. } => "conditioning",
            Error::InvalidBasis(_) => "invalid_basis",
            Error::BasisMismatch(_) => "basis_mismatch",
            Error::Annotation { .. } | Error::AnnotationFile(_) => "annotation",
            Error::Config(_) => "config",
            Error::Evaluation(_) => "evaluation",
            Error::NumericFault { .. } => "numeric_fault",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image { .. } => "image",
            Error::Context { .. } => unreachable!("root() strips context"),
        }
    }
}
