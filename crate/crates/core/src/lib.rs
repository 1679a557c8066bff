#![allow(clippy::unnecessary_cast, clippy::neg_cmp_op_on_partial_ord)]

pub mod costvolume;
pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod init_heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod refinement;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod train;

pub use error::{Error, Result};
