pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod energy;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;

pub use error::{Error, Result};
