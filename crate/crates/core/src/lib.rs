//! Unpaired image-to-image translation with same-stage encoder/decoder
//! latent matching and discriminator-guided patch sampling.

pub mod config;
pub mod dag;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod heads;
pub mod losses;
pub mod nn;
pub mod ops;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
