use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Problems with the on-disk container (LDFC models, LDFD datasets).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u8, found: u8 },
    #[error("blob length mismatch for tensor '{name}': {detail}")]
    BlobLength { name: String, detail: String },
    #[error("graph is not a DAG: {0}")]
    NotDag(String),
    #[error("unsupported combine function '{0}' (only addition is supported)")]
    UnsupportedCombine(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("truncated file: {0}")]
    Truncated(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {context}: {detail}")]
    Shape { context: String, detail: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("unsupported activation '{activation}' in block '{block}' ({reason})")]
    UnsupportedActivation {
        block: String,
        activation: String,
        reason: String,
    },
    #[error("training diverged in block '{block}' at iteration {iteration} (lr = {lr:e}, loss = {loss})")]
    Divergence {
        block: String,
        iteration: usize,
        lr: f64,
        loss: f64,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unreachable sparsity target {target}: maximum achievable sparsity is {max_achievable}")]
    UnreachableSparsity { target: f64, max_achievable: f64 },
    #[error("unknown block '{0}'")]
    UnknownBlock(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Re-labels a shape error with the block it occurred in.
    pub(crate) fn in_block(self, block: &str) -> Self {
        match self {
            Error::Shape { context, detail } => Error::Shape {
                context: format!("block '{block}' ({context})"),
                detail,
            },
            other => other,
        }
    }
}
