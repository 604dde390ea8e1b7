//! Range-image sequence forecasting for rotating LiDAR sensors.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod io;
mod kdtree;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
