//! Angular-margin softmax losses with dynamic inter-class margins
//! (InterFace), their gradient certification, toy-scale training on the
//! hypersphere, verification metrics and Board-Count model selection.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod trainer;

pub use error::{Error, Result};
