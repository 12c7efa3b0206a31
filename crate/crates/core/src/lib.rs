//! Federated next-word prediction with closed vocabularies and three ways of
//! handling out-of-vocabulary words during personalization: mapping them to
//! `[UNK]`, growing the server vocabulary, or learning a per-client adapter
//! over character-level embeddings.

pub mod adapter;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod fedsim;
pub mod metrics;
pub mod model;
pub mod personalize;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod util;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ModelParamsF32 = model::ModelParams<f32>;
pub type ModelParamsF64 = model::ModelParams<f64>;
pub type AdapterParamsF32 = adapter::AdapterParams<f32>;
pub type AdapterParamsF64 = adapter::AdapterParams<f64>;
