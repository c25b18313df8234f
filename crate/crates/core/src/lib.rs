//! FCViT vision backbones built on a small deterministic tensor core.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`ops`]: dense row-major tensors and the fixed-order
//!   kernels (convolution, normalization, activations, the token-mixing
//!   primitives).
//! - [`autograd`]: a flat-tape reverse-mode differentiator over those
//!   kernels.
//! - [`block`] and [`model`]: the FCViT token/channel mixer block and the
//!   staged backbone presets built from it.
//! - [`analysis`]: reference self-attention, weight histograms, and the
//!   similarity-map exports used to compare attention with convolution.
//! - [`io`], [`data`], [`train`]: weight/tensor file formats, the synthetic
//!   shape dataset, and a small AdamW training loop.
//! - [`cli`]: the `fcvit` command-line entry points.
//!
//! Determinism is a contract throughout: every reduction has a documented
//! accumulation order, randomness flows only through explicitly seeded
//! generators, and repeated runs produce bit-identical tensors.

pub mod analysis;
pub mod autograd;
pub mod block;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
