// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Errors raised anywhere in the fencebench pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("range {start}..{end} out of bounds for extent {extent}")]
    Range {
        start: usize,
        end: usize,
        extent: usize,
    },

    #[error("degenerate mask in {0}: no nonzero entries")]
    DegenerateMask(&'static str),

    #[error("training diverged: non-finite value in `{param}`")]
    Divergence { param: String },

    #[error("context overflow: {len} tokens exceeds max context {max}")]
    ContextLength { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenRange { id: usize, vocab: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("readout error: {0}")]
    Readout(String),

    #[error("lexicon error: {0}")]
    Lexicon(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
