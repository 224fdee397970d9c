//! LinearConv: convolution layers whose filters are split into learned
//! primary filters and secondary filters generated as linear combinations
//! of the primaries, plus the machinery to train, fold and account for them.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases.

pub mod accounting;
pub mod alpha;
pub mod autodiff;
pub mod correlation;
pub mod data;
pub mod error;
pub mod linear_conv;
pub mod models;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use alpha::Alpha;
pub use error::{Error, Result};
pub use linear_conv::{CoeffMode, Coefficients, FoldedConv, LinearConvGeometry, LinearConvParams};
pub use models::{ArchSpec, Model, Variant};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
