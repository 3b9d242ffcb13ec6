//! Active Cartesian k-space line selection for classifying undersampled MRI
//! slices, built on a small reverse-mode autodiff engine.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the aliases below fix the
//! precision for the common cases.

// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod classifier;
pub mod experiment;
pub mod fourier;
pub mod masking;
pub mod metrics;
pub mod phantom;
pub mod policy;
pub mod scalar;
pub mod seed;
pub mod ssim;

pub type ComplexMatrixF32 = fourier::ComplexMatrix<f32>;
pub type ComplexMatrixF64 = fourier::ComplexMatrix<f64>;
pub type RealImageF32 = fourier::RealImage<f32>;
pub type RealImageF64 = fourier::RealImage<f64>;
pub type TensorF32 = autodiff::Tensor<f32>;
pub type TensorF64 = autodiff::Tensor<f64>;
pub type GraphF32 = autodiff::Graph<f32>;
pub type GraphF64 = autodiff::Graph<f64>;
pub type ParamSetF32 = autodiff::ParamSet<f32>;
pub type ParamSetF64 = autodiff::ParamSet<f64>;
pub type ClassifierNetF32 = classifier::ClassifierNet<f32>;
pub type ClassifierNetF64 = classifier::ClassifierNet<f64>;
pub type PolicyNetF32 = policy::PolicyNet<f32>;
pub type PolicyNetF64 = policy::PolicyNet<f64>;
