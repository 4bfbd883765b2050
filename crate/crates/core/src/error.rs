//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// The variants map onto the failure classes the pipeline distinguishes:
/// configuration problems (bad user input), contract violations (caller bugs),
/// lookup failures (unknown identities/domains), degenerate numeric input,
/// inference-time state problems, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI maps this error to: 2 for usage/config problems,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 2,
            _ => 1,
        }
    }
}
