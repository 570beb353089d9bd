//! Desk-scale neural machine translation with fine-grained attention.
//!
//! The toolkit trains and decodes encoder-decoder translation models with
//! three attention variants under identical conditions:
//!
//! - `Att`: one scalar score per source position, computed from the previous
//!   decoder state and the annotation vector.
//! - `AttY`: the same, with the previous target word embedding fed to the
//!   score network.
//! - `AttY2D`: fine-grained attention, where the score network emits one
//!   score per *dimension* of the annotation vector and the weights are
//!   normalized over source positions independently for every dimension.
//!
//! Everything runs on a small f64 tensor library with reverse-mode automatic
//! differentiation ([`numerics`]), so every gradient in the model can be
//! verified against finite differences.

pub mod analysis;
pub mod attention;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
