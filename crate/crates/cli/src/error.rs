use std::path::{Path, PathBuf};

use permbarrier::certify::CertifyError;
use permbarrier::polynomial::PolyError;
use permbarrier::verify::VerifyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{origin}:{line}:{column}: {message}")]
    Parse { origin: String, line: usize, column: usize, message: String },
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("`{field}`{loc}: {message}", loc = line_suffix(*.line))]
    Polynomial { field: String, line: Option<usize>, message: String },
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("region export supports at most 3 variables, got {0}; fix the others to export a slice")]
    Dimension(usize),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn line_suffix(line: Option<usize>) -> String {
    line.map(|l| format!(" (line {l})")).unwrap_or_default()
}

impl CliError {
    pub fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self::Invalid { field: field.to_string(), message: message.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}
