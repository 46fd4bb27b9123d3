//! Spatio-temporal video VAE whose latent space stays aligned with a frozen
//! image VAE.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`kernels`], [`graph`], [`gradcheck`]: dense tensors and a
//!   reverse-mode tape for exactly the operations the models need.
//! - [`model`]: image/video VAE construction, 2D→3D weight inflation,
//!   encode/decode and the patch discriminator.
//! - [`regularization`]: temporal mapping functions and the two latent
//!   alignment losses against a frozen image VAE.
//! - [`objective`]: the full training objective, AdamW, batch sampling and
//!   the training loop.
//! - [`tiling`]: block-wise temporal (and spatial) encode/decode.
//! - [`data`]: synthetic videos, PSNR/SSIM, checkpoint and raw-video files.

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod objective;
pub mod regularization;
pub mod selftest;
pub mod tensor;
pub mod tiling;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};
