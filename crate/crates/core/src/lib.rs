pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod hypergraph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod robustness;
pub mod tensor;
pub mod training;

pub use error::{GfefError, Result};
