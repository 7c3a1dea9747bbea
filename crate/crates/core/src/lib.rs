pub mod adapter;
pub mod annotate;
pub mod beam;
pub mod checkpoint;
pub mod codec;
pub mod corpus;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod regularizer;
pub mod tokenizer;
pub mod trainer;

pub use error::{CodecError, Error, Result};
