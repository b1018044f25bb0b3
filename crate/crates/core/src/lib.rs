//! Video person re-identification with an identity feature memory, a
//! sequence-conditioned prompt decoder and a temporal memory diffusion head,
//! on a small reverse-mode autodiff core.

pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod clip_memory;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod tmd;
pub mod train;

pub use error::{Error, Result};
