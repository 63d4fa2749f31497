//! Small reverse-mode autodiff over dense NCHW tensors, with just the layers
//! the depth network uses, two optimizers, a finite-difference oracle and a
//! binary checkpoint archive.

mod check;
mod checkpoint;
mod graph;
mod kernels;
mod optim;
pub mod suite;
mod tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use check::{central_difference, finite_diff_check, relative_error, FdReport};
pub use checkpoint::{Archive, FORMAT_VERSION};
pub use graph::{BatchStats, BnMode, Gradients, Graph, Var, BN_EPS};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape { op: String, left: Vec<usize>, right: Vec<usize> },
    #[error("{0}")]
    Domain(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(String),
}

/// `N(0, 2 / fan_in)` initialization.
pub fn kaiming<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect() }
}

/// Weights `(1, 1, 4, 4)` that make the transposed convolution a bilinear 2x
/// upsampler.
pub fn bilinear_upsample_kernel<T: Real>() -> Tensor<T> {
    let f = [0.25, 0.75, 0.75, 0.25];
    let data = (0..16).map(|i| T::from_f64_lossy(f[i / 4] * f[i % 4])).collect();
    Tensor { shape: vec![1, 1, 4, 4], data }
}
