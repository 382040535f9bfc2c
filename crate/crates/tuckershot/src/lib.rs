//! One-shot whole-network compression of convolutional neural networks.
//!
//! The pipeline has three steps: (1) automatic rank selection with global
//! analytic variational Bayesian matrix factorization, (2) Tucker-1/Tucker-2
//! decomposition of convolution and fully-connected kernels, and (3) SGD
//! fine-tuning of the substituted network. Around that sits a layerwise
//! weights/FLOPs analyzer and a small model file format.
//!
//! Module map:
//! - [`tensor`]: dense N-way arrays, mode-n matricization and products
//! - [`linalg`]: dense SVD and symmetric eigendecomposition
//! - [`vbmf`]: analytic VBMF noise/rank estimation
//! - [`tucker`]: HOSVD/HOOI Tucker decomposition of kernel tensors
//! - [`net`]: minimal CNN graph, forward pass, layer substitution
//! - [`pipeline`]: end-to-end compression and the cost analyzer
//! - [`finetune`]: toy-scale SGD training of (compressed) networks
//! - [`io`]: model / rank / tensor file formats

pub mod error;
pub mod finetune;
pub mod io;
pub mod linalg;
pub mod matrix;
pub mod net;
pub mod pipeline;
pub mod tensor;
pub mod tucker;
pub mod vbmf;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tensor::Tensor;
