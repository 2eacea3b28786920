//! Query-focused retrieval-head reranking on a small decoder-only
//! transformer: probing, listwise scoring, training and evaluation.

pub mod alloc;
pub mod data;
pub mod error;
pub mod eval;
pub mod gate;
pub mod model;
pub mod probe;
pub mod prompt;
pub mod score;
pub mod train;

pub use error::{Error, Result};
