//! Federated continual semantic segmentation on synthetic terrain: a small
//! segmenter, client data and memory, layer-selective rehearsal, rapid
//! head recovery, the federated round loop, and result analysis.

mod error;

pub mod analysis;
pub mod config;
pub mod data;
pub mod experiments;
pub mod federation;
pub mod lsr;
pub mod model;
pub mod nn;
pub mod persist;
pub mod rkr;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
