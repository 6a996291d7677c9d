//! Reverse-mode autodiff and the two end-to-end yield regressors.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the two concrete instantiations.

pub mod attention;
pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod cnn;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod robust;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use attention::MultiHeadSelfAttention;
pub use backbone::{Backbone, BackboneConfig, ConvStage};
pub use checkpoint::Checkpoint;
pub use cnn::{CnnRegressor, CnnRegressorConfig};
pub use error::{NeuralError, Result};
pub use gradcam::grad_cam;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{ParamGrads, Params, Session};
pub use robust::{robust_loss, RobustLossParams};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{ScheduleConfig, TrainOutcome};
pub use transformer::{combine_positional, TransformerConfig, WindowInput, WindowTransformer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Params32 = Params<f32>;
pub type Params64 = Params<f64>;
pub type Graph64 = Graph<f64>;
