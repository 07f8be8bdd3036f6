//! Core mechanisms of a proposal-guided, cascade-denoised detection
//! transformer at desk scale.
//!
//! Everything here is pure computation over `alloc` collections: box
//! geometry, a small reverse-mode autodiff engine, query construction,
//! the decoder, set-prediction matching and losses, synthetic scenes and
//! detection metrics. File formats, checkpoints and the command line live in
//! the companion `hqp` crate.
#![no_std]

extern crate alloc;

pub mod cascade;
pub mod data;
pub mod decoder;
pub mod encode;
mod error;
pub mod eval;
pub mod features;
pub mod geom;
pub mod image;
pub mod losses;
pub mod matching;
pub mod model;
pub mod optim;
pub mod params;
pub mod proposals;
pub mod queries;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use geom::{BoxCxCyWH, BoxXYXY};
pub use tensor::{Graph, Tensor, Var};
