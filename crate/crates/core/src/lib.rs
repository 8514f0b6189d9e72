pub mod agent;
pub mod embedder;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod reward;
pub mod rng;
pub mod sanity;
pub mod sketchgen;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
