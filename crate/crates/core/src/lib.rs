//! Soft-prompt learning against frozen stub encoders.
//!
//! Three prompt conditioners share one classifier head: static context
//! tokens (CoOp), tokens shifted by a meta-net of the global image feature
//! (CoCoOp), and tokens conditioned on local patch features through attention
//! over the prompts (CoPL). Gradients are derived by hand and checked against
//! central differences.

pub mod classifier;
pub mod cli;
pub mod conditioners;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod numerics;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
