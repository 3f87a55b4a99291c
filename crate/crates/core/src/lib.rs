pub mod data;
pub mod dataset;
pub mod densenet;
pub mod error;
pub mod eval;
pub mod gradcam;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod loss;
pub mod optim;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod weights;

pub use dataset::Dataset;
pub use densenet::{Mode, Model, ModelConfig};
pub use error::{Error, Result};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type GraphF64 = Graph<f64>;
pub type GraphF32 = Graph<f32>;
pub type ModelF64 = Model<f64>;
pub type ModelF32 = Model<f32>;
pub type DatasetF64 = Dataset<f64>;
