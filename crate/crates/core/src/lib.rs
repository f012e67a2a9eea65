pub mod adversarial;
pub mod autoencoder;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod flow;
pub mod memory;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = pipeline::StmAe<f32>;
pub type Model64 = pipeline::StmAe<f64>;
pub type MemoryPool32 = memory::MemoryPool<f32>;
pub type MemoryPool64 = memory::MemoryPool<f64>;
