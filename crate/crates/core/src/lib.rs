//! LAFFNet: a lightweight adaptive-feature-fusion network for underwater
//! image enhancement, built on a small from-scratch tensor and reverse-mode
//! autodiff engine.
//!
//! The crate covers the whole pipeline:
//!
//! - [`graph`] / [`tensor`]: dense tensors and a recording tape with exact
//!   gradients for every operation the network and losses use
//! - [`blocks`] / [`model`]: the AFF and residual modules, the nine-block
//!   assembly, and an exact parameter/MAC ledger
//! - [`losses`]: Charbonnier, SSIM and perceptual losses and their weighted sum
//! - [`metrics`]: PSNR, SSIM and the UIQM family
//! - [`synth`]: the underwater image-formation model as a paired-data generator
//! - [`trainer`]: Adam, the step learning-rate schedule, resumable training
//! - [`checkpoint`]: the versioned `LAFF` container format
//! - [`gradcheck`]: finite-difference verification suites
//! - [`cli`]: the `laffnet` command-line front end
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image_io;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use blocks::{aff_forward, residual_forward, AffParams, Gate, ResidualParams};
pub use error::{CheckpointError, LaffError, Result};
pub use graph::{Activation, GradStore, Graph, ParamId, Reduction, Var};
pub use image_io::Image;
pub use model::{build, CostReport, FusionVariant, LaffNetModel, ModelConfig};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};

/// Caps the global worker pool from `LAFF_THREADS` (unset or `0` = automatic).
/// Call once, before any tensor work.
pub fn configure_threads_from_env() {
    let threads = std::env::var("LAFF_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        // An already-initialized pool keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}
