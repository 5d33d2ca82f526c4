//! File formats, configuration and experiment commands around
//! [`tialab_core`].

pub mod blob;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod tables;
pub mod weights;

pub use error::{Error, Result};
