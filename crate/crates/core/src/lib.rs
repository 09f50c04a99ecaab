//! Hierarchical recurrent video paragraph captioner: a GRU sentence
//! generator with temporal/spatial soft attention and multimodal fusion,
//! stacked under a paragraph-level recurrent layer, trained end to end by
//! backpropagation through time with RMSprop and decoded with a pooled
//! beam search.
//!
//! All numerics are plain `f64` with deterministic evaluation order, so a
//! fixed seed reproduces runs bit for bit across platforms.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod layers;
pub mod numerics;
pub mod paragraph_generator;
pub mod sentence_generator;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{RngState, Tensor};
