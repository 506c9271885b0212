//! Constructive actions of fundamental groups of graphs of groups.
//!
//! Given a finite graph of groups with vertex groups of the form `Z^d x F`
//! (`F` a finite group given by its multiplication table) and finite edge
//! groups, this crate builds an amenable, transitive and faithful permutation
//! action of the fundamental group on a countable set, one certificate at a
//! time. The action is assembled edge by edge: each non-tree edge contributes
//! an HNN step, each tree edge an amalgam step, and each step runs a generic
//! engine that grows a partial equivariant bijection `w` under a deterministic
//! requirement schedule. Every claim the engine makes is backed by a
//! certificate (exact rational Folner ratios, explicit transitivity words,
//! explicit moved points) that can be re-checked against the commitment log
//! alone.
pub mod action;
pub mod base;
pub mod cert;
pub mod composer;
pub mod engine;
pub mod finite;
pub mod fnv;
pub mod graph;
pub mod manifest;
pub mod point;
pub mod rng;
pub mod verify;
pub mod word;

use thiserror::Error;

/// Exact rational used for every ratio in certificates.
pub type Q = num_rational::Ratio<i64>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {msg}")]
    Validation { msg: String },
    #[error("budget exhausted during {what} (cap {cap})")]
    Budget { what: String, cap: u64 },
    #[error("certificate {name} failed: {msg}")]
    Certificate { name: String, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation { msg: msg.into() }
    }

    pub fn cert(name: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Certificate { name: name.into(), msg: msg.into() }
    }

    /// Exit-code contract: 0 success, 2 validation, 3 certificate, 4 budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Validation { .. } | Error::Io(_) => 2,
            Error::Certificate { .. } => 3,
            Error::Budget { .. } => 4,
        }
    }
}

/// Global safety valve for orbit-escape and enumeration scans.
///
/// Overridable through the `BAIRE_BUDGET_CAP` environment variable.
pub fn budget_cap() -> u64 {
    static CAP: std::sync::OnceLock<u64> = std::sync::OnceLock::new();
    *CAP.get_or_init(|| {
        std::env::var("BAIRE_BUDGET_CAP")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(1_000_000)
    })
}
