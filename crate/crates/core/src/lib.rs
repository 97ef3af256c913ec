//! Weakly supervised object localization with a dedicated spatial token.
//!
//! A miniature vision transformer carries a learnable spatial token whose
//! query row produces per-patch foreground probabilities; those probabilities
//! modulate attention in the final blocks and are trained jointly with
//! classification through an area prior and a bimodality penalty. The crate
//! bundles the tensor engine, the model, the losses, box/metric evaluation,
//! a synthetic shapes dataset, and the training loop.
//!
//! Core math is generic over the scalar type ([`scalar::Scalar`]): `f32` for
//! training, `f64` for the finite-difference oracle suite.

pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, TensorError, TensorId};

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Oracle-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Training-precision graph.
pub type Graph32 = tensor::Graph<f32>;
/// Oracle-precision graph.
pub type Graph64 = tensor::Graph<f64>;

pub mod locmap;
pub mod model;
pub mod gradcheck;
pub mod losses;
pub mod data;
pub mod metrics;
