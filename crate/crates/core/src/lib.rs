pub mod adapter;
pub mod annotate;
pub mod backbone;
pub mod config;
pub mod error;
pub mod formats;
pub mod linalg;
pub mod metrics;
pub mod prefusion;
pub mod synthgen;
pub mod tensor;
pub mod token_pipeline;
pub mod tokenizer;
pub mod workflow;

pub use error::{Error, Result};
pub use tensor::FeatureTensor;
