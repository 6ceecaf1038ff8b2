//! Self-supervised ViT training with Gram anchoring.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape
//! - [`vit`]: the tiny vision transformer backbone
//! - [`objectives`]: DINO / iBOT / Koleo / Gram losses and Sinkhorn targets
//! - [`train`]: multi-crop sampling, schedules, EMA and the phase steps
//! - [`distill`]: multi-student distillation cost model and loop
//! - [`curation`]: hierarchical k-means and balanced sampling
//! - [`diagnostics`]: similarity maps, locality, PCA rendering and probes
//! - [`runner`]: run directories, configs and manifests behind the CLI

pub mod curation;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Graph, Tensor, Var};
