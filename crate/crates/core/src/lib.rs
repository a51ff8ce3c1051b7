//! Group-rational Kolmogorov-Arnold layers and the transformer built on them.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for kernels, `f64` for
//! reference checks); the aliases below name the two concrete precisions.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod grkan;
pub mod initfit;
pub mod model;
pub mod rational;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use grkan::{DenominatorLayout, GrKanLayer, GroupRationalParams, KernelVariant};
pub use model::{KatConfig, KatModel};
pub use rational::RationalCoeffs;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type RationalCoeffs32 = RationalCoeffs<f32>;
pub type RationalCoeffs64 = RationalCoeffs<f64>;
pub type GrKanLayer32 = GrKanLayer<f32>;
pub type GrKanLayer64 = GrKanLayer<f64>;
pub type KatModel32 = KatModel<f32>;
pub type KatModel64 = KatModel<f64>;
