//! Decoder-only language model with differential attention and PolyNorm,
//! plus the training loop and corpus pipeline that feed it.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod hash;
pub mod model;
pub mod polynorm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
