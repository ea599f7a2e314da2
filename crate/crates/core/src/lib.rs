pub mod clause_filter;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod fixture;
pub mod magnifier;
pub mod nnlab;
pub mod pipeline;
pub mod registry;
pub mod remote;
pub mod types;
pub mod video;
pub mod vlm;

pub use error::{Error, Result};
