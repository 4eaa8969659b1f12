//! IO and orchestration around `sgi-core`: binary dataset/checkpoint
//! formats, TOML experiment configs with content hashing, line-delimited
//! JSON logs, the score-table CSV / report JSON pair, the verification
//! suite, and the command implementations behind the `sgi` binary.

pub mod config;
pub mod formats;
pub mod logs;
pub mod report;
pub mod runner;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] sgi_core::CoreError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
}

impl CliError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> CliError {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex-encoded SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
