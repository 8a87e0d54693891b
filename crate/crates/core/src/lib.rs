pub mod adapters;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use adapters::{init_adapters, merge, AdapterMeta, AdapterPair, AdapterSet, RunTag};
pub use error::{DecodeError, Error, Result};
pub use model::{BaseModel, ModelConfig, Tokenizer};
pub use scalar::{DType, Scalar};
pub use tensor::{Graph, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type BaseModel64 = BaseModel<f64>;
pub type BaseModel32 = BaseModel<f32>;
pub type AdapterSet64 = AdapterSet<f64>;
pub type AdapterSet32 = AdapterSet<f32>;
