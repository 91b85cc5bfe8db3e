//! Prosody-aware flow-matching text-to-speech on a synthetic pseudo-speech corpus.

// `!(x > 0.0)`-style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustic;
pub mod control;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod intonation;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phrasing;
pub mod pitch;
pub mod selftest;
pub mod text_aligner;
pub mod training;

pub use error::{Error, Result};
