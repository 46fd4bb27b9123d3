//! Temporal mapping functions ψ and the latent alignment losses that tie a
//! video VAE to a frozen image VAE.
//!
//! ψ maps a `(B, T+1, H, W, 3)` video to `T/ρ_t + 1` frames: frame 0 is kept
//! and each following window of `ρ_t` frames contributes one frame. The
//! decoder-side loss decodes video latents with the image decoder and
//! compares against ψ(X); the encoder-side loss decodes image latents of
//! ψ(X) with the video decoder and compares against X.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::params::{Bound, ParamStore};
use crate::model::vae::{reparameterize, Vae};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PsiKind {
    First,
    Slice,
    Average,
    Random,
}

impl PsiKind {
    pub const ALL: [PsiKind; 4] = [PsiKind::First, PsiKind::Slice, PsiKind::Average, PsiKind::Random];
}

impl fmt::Display for PsiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsiKind::First => "first",
            PsiKind::Slice => "slice",
            PsiKind::Average => "average",
            PsiKind::Random => "random",
        })
    }
}

impl FromStr for PsiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "first-frame" => Ok(PsiKind::First),
            "slice" => Ok(PsiKind::Slice),
            "average" => Ok(PsiKind::Average),
            "random" => Ok(PsiKind::Random),
            _ => Err(Error::Config(format!(
                "unknown mapping function {:?} (expected first, slice, average or random)",
                s
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PsiSpec {
    pub kind: PsiKind,
    pub rho_t: usize,
    pub seed: u64,
}

impl PsiSpec {
    pub fn new(kind: PsiKind, rho_t: usize, seed: u64) -> Self {
        PsiSpec { kind, rho_t, seed }
    }

    /// Same kind and factor with a different random draw.
    pub fn reseeded(&self, seed: u64) -> Self {
        PsiSpec { seed, ..*self }
    }

    /// Number of output frames for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> Result<usize> {
        if self.rho_t == 0 {
            return Err(Error::contract("map_psi", "ρ_t must be positive"));
        }
        if frames == 0 || !(frames - 1).is_multiple_of(self.rho_t) {
            return Err(Error::Shape(format!(
                "mapping needs T+1 frames with T divisible by {}, got {} frames",
                self.rho_t, frames
            )));
        }
        Ok(match self.kind {
            PsiKind::First => 1,
            _ => 1 + (frames - 1) / self.rho_t,
        })
    }

    /// Input frame picked for each output frame (all kinds except average).
    pub fn indices(&self, frames: usize) -> Result<Vec<usize>> {
        let n = self.output_frames(frames)?;
        let r = self.rho_t;
        Ok(match self.kind {
            PsiKind::First => vec![0],
            PsiKind::Slice => (0..n).map(|j| j * r).collect(),
            PsiKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                std::iter::once(0)
                    .chain((1..n).map(|j| (j - 1) * r + 1 + rng.gen_range(0..r)))
                    .collect()
            }
            PsiKind::Average => {
                return Err(Error::contract("psi_indices", "average does not select frames"));
            }
        })
    }
}

/// Applies ψ to a `(B, T+1, H, W, C)` video.
pub fn map_psi<T: Real>(spec: &PsiSpec, video: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, t, h, w, c] = video.dims5()?;
    let n = spec.output_frames(t)?;
    if spec.kind != PsiKind::Average {
        return video.gather_time(&spec.indices(t)?);
    }
    let r = spec.rho_t;
    let frame = h * w * c;
    let src = video.data();
    let scale = 1.0 / r as f64;
    let mut out = Vec::with_capacity(b * n * frame);
    for bi in 0..b {
        let clip = &src[bi * t * frame..(bi + 1) * t * frame];
        out.extend_from_slice(&clip[..frame]);
        for j in 1..n {
            let first = (j - 1) * r + 1;
            out.extend((0..frame).map(|i| {
                let s: f64 = (first..first + r).map(|f| clip[f * frame + i].as_f64()).sum();
                T::of_f64(s * scale)
            }));
        }
    }
    Tensor::from_vec(&[b, n, h, w, c], out)
}

/// A frozen image VAE bound on a graph.
pub struct FrozenImage<'a> {
    pub vae: &'a Vae,
    pub params: &'a Bound,
}

fn check_image(image: &Vae) -> Result<()> {
    if !image.config.is_image() {
        return Err(Error::Config("the reference model must be an all-2d image VAE".into()));
    }
    Ok(())
}

/// `MSE(ψ(X), D_i(Z))` for a video latent `Z` already on the graph. With
/// first-frame ψ only latent frame 0 is decoded.
pub fn reg_decoder_term<T: Real>(
    g: &mut Graph<T>,
    image: &FrozenImage,
    latent: Var,
    psi_target: &Tensor<T>,
) -> Result<Var> {
    check_image(image.vae)?;
    let n = g.shape(latent)[1];
    let m = psi_target.dims5()?[1];
    let z = match m {
        _ if m == n => latent,
        1 => g.slice_time(latent, 0, 1)?,
        _ => {
            return Err(Error::Shape(format!(
                "ψ produced {} frames but the latent has {}",
                m, n
            )))
        }
    };
    let decoded = image.vae.decode_graph(g, image.params, z)?;
    let target = g.input(psi_target.clone());
    g.mse_loss(decoded, target)
}

/// `MSE(X, D_v(E_i(ψ(X))))`: ψ(X) is encoded frame by frame with the frozen
/// image encoder (posterior mean) and decoded by the video decoder. With
/// first-frame ψ only frame 0 of `X` is compared.
pub fn reg_encoder_term<T: Real>(
    g: &mut Graph<T>,
    image: &FrozenImage,
    video: &Vae,
    video_params: &Bound,
    x: Var,
    psi_video: &Tensor<T>,
) -> Result<Var> {
    check_image(image.vae)?;
    let frames = g.shape(x)[1];
    let m = psi_video.dims5()?[1];
    let expected = 1 + (frames - 1) / video.config.temporal_factor();
    let target = match m {
        _ if m == expected => x,
        1 => g.slice_time(x, 0, 1)?,
        _ => {
            return Err(Error::Shape(format!(
                "encoder alignment needs {} mapped frames to rebuild {} frames, got {}",
                expected, frames, m
            )))
        }
    };
    let xi = g.input(psi_video.clone());
    let post = image.vae.encode_graph(g, image.params, xi)?;
    let rec = video.decode_graph(g, video_params, post.mean)?;
    g.mse_loss(rec, target)
}

/// Scalar value of the encoder-side alignment loss.
pub fn reg_loss_encoder<T: Real>(
    image: &Vae,
    image_params: &ParamStore<T>,
    video: &Vae,
    video_params: &ParamStore<T>,
    x: &Tensor<T>,
    psi: &PsiSpec,
) -> Result<f64> {
    let psi_x = map_psi(psi, x)?;
    let mut g = Graph::new();
    let ip = image_params.bind(&mut g, false);
    let vp = video_params.bind(&mut g, false);
    let xv = g.input(x.clone());
    let frozen = FrozenImage { vae: image, params: &ip };
    let loss = reg_encoder_term(&mut g, &frozen, video, &vp, xv, &psi_x)?;
    Ok(g.value(loss).item().as_f64())
}

/// Scalar value of the decoder-side alignment loss. `noise` defaults to zero
/// (the posterior mean).
pub fn reg_loss_decoder<T: Real>(
    image: &Vae,
    image_params: &ParamStore<T>,
    video: &Vae,
    video_params: &ParamStore<T>,
    x: &Tensor<T>,
    psi: &PsiSpec,
    noise: Option<&Tensor<T>>,
) -> Result<f64> {
    let psi_x = map_psi(psi, x)?;
    let mut g = Graph::new();
    let ip = image_params.bind(&mut g, false);
    let vp = video_params.bind(&mut g, false);
    let xv = g.input(x.clone());
    let post = video.encode_graph(&mut g, &vp, xv)?;
    let noise = match noise {
        Some(n) => n.clone(),
        None => Tensor::zeros(g.shape(post.mean)),
    };
    let z = reparameterize(&mut g, &post, noise)?;
    let frozen = FrozenImage { vae: image, params: &ip };
    let loss = reg_decoder_term(&mut g, &frozen, z, &psi_x)?;
    Ok(g.value(loss).item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize) -> Tensor<f64> {
        let data = (0..frames).flat_map(|t| std::iter::repeat_n(t as f64, 4 * 3)).collect();
        Tensor::from_vec(&[1, frames, 2, 2, 3], data).unwrap()
    }

    fn frame_values(v: &Tensor<f64>) -> Vec<f64> {
        (0..v.shape()[1]).map(|t| v[[0, t, 0, 0, 0]]).collect()
    }

    #[test]
    fn slice_takes_window_ends() {
        let spec = PsiSpec::new(PsiKind::Slice, 4, 0);
        assert_eq!(frame_values(&map_psi(&spec, &ramp(9)).unwrap()), vec![0.0, 4.0, 8.0]);
    }

    #[test]
    fn average_of_ramp_is_window_center() {
        let spec = PsiSpec::new(PsiKind::Average, 4, 0);
        assert_eq!(frame_values(&map_psi(&spec, &ramp(9)).unwrap()), vec![0.0, 2.5, 6.5]);
    }

    #[test]
    fn first_frame_only() {
        let spec = PsiSpec::new(PsiKind::First, 4, 0);
        assert_eq!(frame_values(&map_psi(&spec, &ramp(9)).unwrap()), vec![0.0]);
    }

    #[test]
    fn rejects_bad_frame_count() {
        let spec = PsiSpec::new(PsiKind::Slice, 4, 0);
        assert!(matches!(map_psi(&spec, &ramp(8)), Err(Error::Shape(_))));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in PsiKind::ALL {
            assert_eq!(k.to_string().parse::<PsiKind>().unwrap(), k);
        }
        assert!("middle".parse::<PsiKind>().is_err());
    }
}
