//! Span / span-violation decomposition of attention gradients.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`]: Gram matrices, pseudoinverses and span projectors.
//! * [`scores`]: the score matrix and its unidirectional and 8-block splits.
//! * [`grad`]: standard, unidirectional, simplest, reductionistic and
//!   per-order score-decomposition gradients for `Q` and `K`.
//! * [`attention`] and [`model`]: a small transformer LM with a manual
//!   backward pass whose attention gradients come from [`grad`].
//! * [`train`], [`data`]: byte-level corpora, windows, Adam with gradient
//!   accumulation, metrics.
//! * [`audit`], [`experiment`]: invariant suites, finite-difference audits and
//!   multi-run experiments used by the `spangrad` CLI.

pub mod attention;
pub mod audit;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod scores;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
