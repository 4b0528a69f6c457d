//! Two-branch human-object interaction decoder over a frozen segmentation
//! model, with pseudo-labelled union/intersection masks, set matching,
//! evaluation and prompt-based retrieval.

pub mod autodiff;
pub mod criterion;
pub mod decoder;
pub mod error;
pub mod evalinfer;
pub mod foundation;
pub mod geometry;
pub mod model;
pub mod openvocab;
pub mod par;
pub mod pipeline;
pub mod pseudolabel;
pub mod tensor;

pub use error::{Error, Result};
