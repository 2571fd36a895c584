//! Keypoint-promptable part-based person re-identification.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod retrieval;
pub mod tracker;
pub mod train;
pub mod model;

pub use error::{Error, Result};
