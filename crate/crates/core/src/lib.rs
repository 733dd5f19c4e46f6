//! Novelty detection in system-call request traces.
//!
//! Requests are delimited from a kernel event stream, mapped to a joint
//! representation of embedded and sinusoidally encoded fields, and scored
//! by a left-to-right language model. A request whose perplexity reaches a
//! calibrated threshold is flagged as novel.

pub mod cli;
pub mod config;
pub mod detect;
pub mod encode;
pub mod error;
pub mod lm;
pub mod synth;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
