//! Reverse-mode automatic differentiation, Gaussian utilities and Adam.

mod adam;
mod gaussian;
pub mod layers;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use gaussian::{
    gaussian_logpdf, gaussian_logpdf_rows, kl_diag_gaussians, kl_diag_gaussians_rows,
    reparam_sample, DiagGaussian, MIN_VARIANCE,
};
pub use params::{ParamId, ParamStore, Session};
pub use tape::{sigmoid, softplus, ConvGeometry, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported tensor rank for shape {shape:?}")]
    Rank {
        op: &'static str,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),
}
