//! Progressive low-bit weight quantization on a small decoder-only transformer.
//!
//! The crate walks full-precision weights through balanced INT4 block-wise
//! post-training quantization and then into INT2 stretched-elastic
//! quantization trained with distillation. Every quantizer, gradient rule,
//! loss and diagnostic is exposed as a library operation.

pub mod autodiff;
pub mod container;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod ptq;
mod linalg;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Result, UpqError};
pub use tensor::Tensor;
