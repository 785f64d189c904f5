//! Knowledge graphs, graph embeddings, image encoders and contextual
//! contrastive training on top of `ctxf-autodiff`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod infusion;
pub mod kg;
pub mod kge;
pub mod predict;

pub use error::{CoreError, Result};
