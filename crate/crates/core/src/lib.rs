//! Hyperspectral image segmentation with regional transformers and
//! progressive pseudo-labeling.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with reverse-mode differentiation.
//! * [`dataio`]: scene containers, the `HSC1` file format, synthetic scenes,
//!   PCA, patch extraction and train/test splits.
//! * [`dsrt`]: the dynamic shifted regional transformer layer.
//! * [`blocks`]: SE gating, encoder/decoder stages, cross feature interaction
//!   and discriminative feature selection.
//! * [`network`]: single- and multi-branch models, losses, checkpoints.
//! * [`trainer`]: optimisation, tiled inference and the pseudo-labeling loop.
//! * [`eval`]: confusion matrices, OA/AA/Kappa and map rendering.

pub mod blocks;
pub mod dataio;
pub mod dsrt;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result, TensorError};
pub use tensor::{DType, Tensor};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
