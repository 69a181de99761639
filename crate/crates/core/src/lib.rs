//! Deterministic simulation of LiDAR, camera and radar timing for studying
//! how stale sensor data affects a fusion detector.

pub mod alignment;
pub mod config;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod format;
pub mod geometry;
pub mod rng;
pub mod scene;
pub mod sensors;
pub mod staleness;

pub use error::{Error, Result};
