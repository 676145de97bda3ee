//! Building blocks for a learned image codec whose decoder side can be steered
//! between low distortion and high perceptual quality without touching the
//! bitstream.
//!
//! * [`autograd`], [`nn`], [`optim`]: a small reverse-mode autodiff engine with
//!   the layers and optimizer needed to train every network here.
//! * [`codec`]: the fixed base codec (analysis/synthesis transforms, factorized
//!   Gaussian entropy model, range coder, bitstream).
//! * [`fusion`]: auxiliary encoder, conditional latent denoiser, noise schedule
//!   and the τ-controlled DDIM sampler.
//! * [`metrics`]: PSNR, SSIM, a random-feature perceptual distance and BD-rate.

pub mod autograd;
pub mod codec;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
