//! Adversarial camouflage textures for toy vehicle detectors.

pub mod attention;
pub mod config;
pub mod dataset;
pub mod detector;
mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod image_io;
pub mod losses;
pub mod optimize;
pub mod scene;

pub use error::{Error, Result};
