//! Interdomain attention: softmax-free token mixing through a fixed-size
//! state obtained by projecting keys and values onto a set of basis
//! functions over the sequence axis.
//!
//! The crate contains the exact-basis reference path, a learned layer whose
//! basis is the impulse response of a diagonal complex state-space model,
//! four interchangeable scan backends, parameter and state accounting, and
//! an operation-counting decode benchmark.

pub mod accounting;
pub mod attention;
pub mod bench;
pub mod basis;
pub mod config;
pub mod error;
pub mod features;
pub mod layer;
pub mod linalg;
pub mod par;
pub mod ssm;
pub mod suites;

pub use config::{validate, Backend, ModelConfig, Readout, ValidatedConfig, Variant};
pub use error::{Error, Result};
pub use linalg::Mat;
