//! Interpretable part models mined from convolutional feature maps.
//!
//! An [`model::AogModel`] organizes one semantic part as an And-Or graph: the part
//! chooses among part templates, each template composes latent patterns, and each
//! latent pattern chooses one neural unit of one feature-map channel. Templates are
//! mined from a few annotated boxes ([`miner`]), parsed top-down on new images
//! ([`parser`]), and grown through an active question-answering loop ([`qa`]).

// `!(x > 0.0)` is the idiom for rejecting NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod fmap;
pub mod geometry;
pub mod miner;
pub mod model;
pub mod oracle;
pub mod parser;
pub mod qa;
pub mod records;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
