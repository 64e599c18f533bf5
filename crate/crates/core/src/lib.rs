//! Rational-inattention discrete choice with optional persuasion.
//!
//! The crate covers the full pipeline: solving the attention-allocation
//! problem for unconditional choice probabilities ([`ri`]), inverting observed
//! market shares for utility shocks ([`inversion`]), Bayesian signal
//! structures that reweight beliefs ([`persuasion`]), simulation of synthetic
//! markets ([`simulate`]), two-step GMM estimation ([`moments`]), and
//! information/welfare reporting ([`infotheory`], [`welfare`]).
//!
//! See the `book/` guide for worked walkthroughs; its code snippets compile
//! and run as doc-tests of this crate.

pub mod error;
pub mod infotheory;
pub mod inversion;
pub mod model;
pub mod moments;
pub mod persuasion;
pub mod ri;
pub mod simulate;
pub mod welfare;

mod optim;

#[cfg(doctest)]
mod guide;

pub use error::{Error, Result};

/// Library version, as compiled.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
