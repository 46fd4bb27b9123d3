//! Image/video VAE construction, weight inflation and the patch discriminator.

pub mod config;
pub mod discriminator;
pub mod inflate;
pub mod layers;
pub mod params;
pub mod vae;

pub use config::{ConvMix, ModelConfig};
pub use discriminator::Discriminator;
pub use inflate::inflate_2d_to_3d;
pub use params::{count_params, Bound, ParamStore};
pub use vae::{build_model, reparameterize, Decoder, Encoder, LatentPosterior, PosteriorVars, Vae};
