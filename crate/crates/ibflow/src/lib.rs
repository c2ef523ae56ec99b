//! Information-bottleneck embedding training with a conditional-flow
//! redundancy estimator.
//!
//! The library trains a small attentive-pooling embedding network under a
//! two-term objective: a discriminative loss (angular-margin or one-class
//! softmax) pulls class information into the embedding, while a redundancy
//! term — a sample-based mutual-information upper bound whose conditional
//! likelihoods come from a conditional normalizing flow — squeezes
//! everything else out. The flow and the embedding network are trained in
//! alternation: each epoch first fits the flow to the current embeddings by
//! likelihood maximization, then updates the embedding network against the
//! combined objective with the flow frozen.
//!
//! Start with the examples, one per capability:
//!
//! * `gen_data` — build a factor-controlled synthetic dataset and round-trip
//!   it through the line-oriented file format.
//! * `train_ib` — run the alternating training loop on synthetic data and
//!   watch the per-epoch metrics.
//! * `evaluate` — dump embeddings from a checkpoint, score cosine trials,
//!   and run class/nuisance linear probes.
//! * `mi_check` — validate the mutual-information upper bound against
//!   analytic correlated-Gaussian ground truth.
//! * `grad_check` — compare every analytic gradient path against central
//!   finite differences.
//! * `flow_density` — demonstrate flow invertibility and that the
//!   conditional density integrates to one.
//! * `pipeline` — the whole journey end to end at tiny scale: generate,
//!   train, evaluate, report.
//!
//! Run one with `cargo run --release --example <name>`. The same
//! capabilities are scriptable through the `ibflow` binary (`gen-data`,
//! `train`, `eval`, `mi-check`, `grad-check` subcommands driven by a TOML
//! config; see [`cli`]).

pub mod cli;
pub mod encoder;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod miest;
pub mod objectives;
pub mod seeds;
pub mod synthdata;
pub mod tape;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or invalid argument values (exit 2).
    #[error("config error: {0}")]
    Config(String),
    /// File-system or serialization failure (exit 3).
    #[error("i/o error: {0}")]
    Io(String),
    /// Malformed data file content (exit 3).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// Incompatible tensor shapes in a public API call (exit 2).
    #[error("shape error: {0}")]
    Shape(String),
    /// Input outside an operation's mathematical domain (exit 2).
    #[error("domain error: {0}")]
    Domain(String),
    /// Non-finite value produced during training or evaluation (exit 4).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Unreadable, corrupt, or mismatched checkpoint (exit 5).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// A verification suite reported failures (exit 6).
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
