//! Hierarchical video-clip contrastive pretraining on synthetic timelines.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod theory;
pub mod timeline;
pub mod trainer;

pub use error::{Error, Result};
