//! Outcome-aligned representation learning for longitudinal binary prediction.
//!
//! An encoder maps irregularly sampled event sequences to embeddings, a
//! logistic head turns embeddings plus static features into risk, and both are
//! trained in a single stage on cross-entropy minus a Rayleigh quotient that
//! rewards separated class means relative to within-class scatter.
//!
//! * [`ndcore`]: dense arrays, reverse-mode tape, finite-difference oracle
//! * [`model`]: trajectories, encoder, risk head
//! * [`objective`]: cross-entropy, class statistics, Rayleigh quotient, running means
//! * [`metrics`]: AUROC, AUPRC, Brier, ECE, embedding geometry
//! * [`synthcohort`]: synthetic cohorts with a planted outcome signal
//! * [`trainkit`]: SGD training, evaluation, checkpoints, sample-efficiency sweep
//! * [`cli`]: the `outcome-align` command line

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ndcore;
pub mod objective;
pub mod synthcohort;
pub mod trainkit;

pub use error::{Error, Result};
