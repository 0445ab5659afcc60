pub mod analog;
pub mod checkpoint;
pub mod config;
pub mod counters;
pub mod data;
pub mod error;
pub mod exact;
pub mod graph;
pub mod inject;
pub mod model;
pub mod mult;
pub mod optim;
pub mod proxy;
pub mod report;
pub mod rng;
pub mod sc;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
