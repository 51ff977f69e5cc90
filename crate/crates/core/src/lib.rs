//! Training toolkit for neural networks whose weight matrices are kept
//! orthogonal (strictly, via Stiefel-manifold SGD) or nearly orthogonal
//! (via singular value bounding or soft spectral penalties), together with
//! normalization variants that preserve layer conditioning and probes that
//! measure the spectral/isometry geometry of trained networks.
//!
//! Crate layout:
//! - [`linalg`]: dense matrix kernels (SVD, QR, power iteration), generic
//!   over the scalar type.
//! - [`opt`]: orthogonality mechanisms and the SGD-with-momentum step.
//! - [`net`]: feed-forward network definition, forward pass with trace
//!   capture, reverse-mode gradients.
//! - [`norm`]: batch normalization and its bounded/degenerate variants.
//! - [`probe`]: per-layer spectra, induced linear maps, local-linearity
//!   radii, expansion/contraction statistics.
//! - [`data`]: dataset loaders (MNIST IDX, CIFAR-10 binary), synthetic
//!   generators, and image corruptions.
//! - [`train`]: learning-rate schedule, training loop, evaluation.
//! - [`config`] / [`checkpoint`]: run configuration and binary checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod linalg;
pub mod net;
pub mod norm;
pub mod opt;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod train;

pub use linalg::DenseMatrix;
pub use scalar::Scalar;

/// The working matrix type of the network/training stack. Datasets,
/// checkpoints, and reports are all pinned to f64.
pub type Mat = DenseMatrix<f64>;

/// Single-precision alias for callers that want the kernels at f32.
pub type Mat32 = DenseMatrix<f32>;
