#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Uncertainty-based optimal subsampling for softmax (multinomial logistic)
//! regression.
//!
//! The crate covers both coreset selection, where every row is labeled and
//! the goal is a small weighted subset, and active learning, where labels are
//! queried only for the rows that get drawn. Scores come either from the
//! exact Fisher-information trace or from the logit covariance of an
//! ensemble fitted on held-out probe data.

pub mod cli;
pub mod error;
pub mod io;
pub mod model;
pub mod sampler;
pub mod selfcheck;
pub mod simulation;
pub mod solver;
pub mod uncertainty;

pub use error::{CopsError, Result};
pub use model::{Coefficients, Dataset};
