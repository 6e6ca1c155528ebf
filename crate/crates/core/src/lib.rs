#![allow(clippy::too_many_arguments, clippy::large_enum_variant, clippy::needless_range_loop, clippy::type_complexity)]

pub mod cli;
pub mod config;
pub mod data;
pub mod dsp;
mod error;
pub mod heads;
pub mod mae;
pub mod ndauto;
pub mod pipeline;
pub mod tokens;
pub mod train;
pub mod vqvae;

pub use error::{Error, Result};
