use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;
pub const EXIT_DIVERGENCE: i32 = 5;
pub const EXIT_IO: i32 = 6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ldfc::Error),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },
    #[error("invalid JSON in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
    #[error("replay mismatch: {0}")]
    Replay(String),
}

impl CliError {
    pub fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::File {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use ldfc::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Format(_) | E::UnsupportedActivation { .. } => EXIT_FORMAT,
                E::Shape { .. } => EXIT_SHAPE,
                E::Divergence { .. } | E::NonFinite(_) => EXIT_DIVERGENCE,
                E::Io(_) => EXIT_IO,
                E::InvalidArgument(_) | E::UnreachableSparsity { .. } | E::UnknownBlock(_) => EXIT_USAGE,
            },
            CliError::File { .. } | CliError::Csv(_) => EXIT_IO,
            CliError::Json { .. } => EXIT_FORMAT,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Replay(_) => EXIT_OTHER,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldfc::FormatError;

    #[test]
    fn codes_are_distinct_per_class() {
        let format = CliError::Core(ldfc::Error::Format(FormatError::NotDag("x".into())));
        let shape = CliError::Core(ldfc::Error::Shape {
            context: "c".into(),
            detail: "d".into(),
        });
        let diverged = CliError::Core(ldfc::Error::Divergence {
            block: "b".into(),
            iteration: 3,
            lr: 1e-3,
            loss: f64::NAN,
        });
        let io = CliError::file("x", io::Error::other("gone"));
        let codes = [
            format.exit_code(),
            shape.exit_code(),
            diverged.exit_code(),
            io.exit_code(),
        ];
        assert_eq!(codes, [EXIT_FORMAT, EXIT_SHAPE, EXIT_DIVERGENCE, EXIT_IO]);
        assert_eq!(CliError::Usage("u".into()).exit_code(), EXIT_USAGE);
    }
}
