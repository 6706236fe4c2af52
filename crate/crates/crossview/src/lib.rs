pub mod checkpoint;
pub mod crop;
pub mod data;
pub mod eval;
pub mod geo;
pub mod loss;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod vit;
pub use tensor::{Scalar, Tensor, TensorError};
