//! Tversky-loss 3D U-net for highly imbalanced volumetric segmentation.
//!
//! The crate is a self-contained f64 stack: dense tensors and layer
//! primitives with exact backward passes (`tensor`, `nn`), the Tversky loss
//! and its special cases (`loss`), confusion/PR metrics (`metrics`), the
//! U-net with symbolic shape planning and checkpointing (`unet`), a
//! synthetic imbalanced-volume generator with `TVOL1` file I/O (`data`),
//! Adam with stepped decay (`optim`), the train/eval/sweep harness
//! (`harness`), and finite-difference verification suites (`gradcheck`).
//!
//! Everything is deterministic given the configured seeds: reductions run in
//! fixed order and all randomness flows through named ChaCha streams.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
