//! Encoder/decoder topology following the latent-diffusion first-stage VAE,
//! with temporal convolutions, strided temporal downsampling in the encoder
//! and channel-unfolding temporal upsampling in the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::config::{ConvMix, ModelConfig};
use crate::model::layers::{init_store, Conv, Norm, ParamSpec, ResBlock};
use crate::model::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PIXEL_CHANNELS: usize = 3;
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    /// conv_in / conv_out / resampling convs
    Main,
    ResA,
    ResB,
}

fn temporal_taps(config: &ModelConfig, role: Role) -> usize {
    let kt = config.effective_temporal_kernel();
    match (config.conv_mix, role) {
        (ConvMix::All2d, _) => 1,
        (ConvMix::Hybrid2d3d, Role::ResB) => 1,
        _ => kt,
    }
}

fn res_block(config: &ModelConfig, name: &str, cin: usize, cout: usize) -> ResBlock {
    ResBlock::new(
        name,
        cin,
        cout,
        config.norm_groups,
        temporal_taps(config, Role::ResA),
        temporal_taps(config, Role::ResB),
    )
}

/// Number of ResBlocks in the mid block: two plus the slot that holds
/// attention in the full-size model.
const MID_BLOCKS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLevel {
    pub blocks: Vec<ResBlock>,
    pub down: Option<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub conv_in: Conv,
    pub levels: Vec<EncoderLevel>,
    pub mid: Vec<ResBlock>,
    pub norm_out: Norm,
    pub conv_out: Conv,
    pub quant_conv: Conv,
    pub latent_channels: usize,
}

impl Encoder {
    pub fn new(config: &ModelConfig) -> Self {
        let main = temporal_taps(config, Role::Main);
        let mut ch = config.channels_at(0);
        let conv_in = Conv::new("encoder.conv_in".into(), PIXEL_CHANNELS, ch, main, 3, [1, 1, 1]);
        let mut levels = Vec::new();
        for (i, _) in config.channel_multipliers.iter().enumerate() {
            let out = config.channels_at(i);
            let blocks = (0..config.resblocks_per_level)
                .map(|j| {
                    let b = res_block(config, &format!("encoder.level{}.res{}", i, j), ch, out);
                    ch = out;
                    b
                })
                .collect();
            let down = (i < config.spatial_down_levels).then(|| {
                let st = if i < config.temporal_down_levels { 2 } else { 1 };
                Conv::new(format!("encoder.level{}.down", i), ch, ch, main, 3, [st, 2, 2])
            });
            levels.push(EncoderLevel { blocks, down });
        }
        let mid = (0..MID_BLOCKS)
            .map(|j| res_block(config, &format!("encoder.mid.res{}", j), ch, ch))
            .collect();
        let c2 = 2 * config.latent_channels;
        Encoder {
            conv_in,
            levels,
            mid,
            norm_out: Norm::new("encoder.norm_out".into(), ch, config.norm_groups),
            conv_out: Conv::new("encoder.conv_out".into(), ch, c2, main, 3, [1, 1, 1]),
            quant_conv: Conv::new("encoder.quant_conv".into(), c2, c2, 1, 1, [1, 1, 1]),
            latent_channels: config.latent_channels,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv_in.specs(out);
        for l in &self.levels {
            l.blocks.iter().for_each(|b| b.specs(out));
            if let Some(d) = &l.down {
                d.specs(out);
            }
        }
        self.mid.iter().for_each(|b| b.specs(out));
        self.norm_out.specs(out);
        self.conv_out.specs(out);
        self.quant_conv.specs(out);
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut v = vec![&self.conv_in];
        for l in &self.levels {
            l.blocks.iter().for_each(|b| v.extend(b.convs()));
            v.extend(l.down.as_ref());
        }
        self.mid.iter().for_each(|b| v.extend(b.convs()));
        v.push(&self.conv_out);
        v.push(&self.quant_conv);
        v
    }

    /// Pixels `(B, T, H, W, 3)` to posterior moments.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<PosteriorVars> {
        let mut h = self.conv_in.forward(g, p, x)?;
        for l in &self.levels {
            for b in &l.blocks {
                h = b.forward(g, p, h)?;
            }
            if let Some(d) = &l.down {
                h = d.forward(g, p, h)?;
            }
        }
        for b in &self.mid {
            h = b.forward(g, p, h)?;
        }
        h = self.norm_out.forward(g, p, h)?;
        h = g.silu(h)?;
        h = self.conv_out.forward(g, p, h)?;
        let moments = self.quant_conv.forward(g, p, h)?;
        let c = self.latent_channels;
        let mean = g.slice_channels(moments, 0, c)?;
        let raw = g.slice_channels(moments, c, c)?;
        let log_variance = g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(PosteriorVars {
            moments,
            mean,
            log_variance,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Upsample {
    pub conv: Conv,
    /// Temporal expansion factor realized by unfolding output channels into time.
    pub temporal_factor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLevel {
    pub up: Option<Upsample>,
    pub blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub post_quant_conv: Conv,
    pub conv_in: Conv,
    pub mid: Vec<ResBlock>,
    /// Ordered from the coarsest level to the finest.
    pub levels: Vec<DecoderLevel>,
    pub norm_out: Norm,
    pub conv_out: Conv,
}

impl Decoder {
    pub fn new(config: &ModelConfig) -> Self {
        let main = temporal_taps(config, Role::Main);
        let n = config.channel_multipliers.len();
        let c = config.latent_channels;
        let mut ch = config.channels_at(n - 1);
        let post_quant_conv = Conv::new("decoder.post_quant_conv".into(), c, c, 1, 1, [1, 1, 1]);
        let conv_in = Conv::new("decoder.conv_in".into(), c, ch, main, 3, [1, 1, 1]);
        let mid = (0..MID_BLOCKS)
            .map(|j| res_block(config, &format!("decoder.mid.res{}", j), ch, ch))
            .collect();
        let mut levels = Vec::new();
        for i in (0..n).rev() {
            let up = (i < config.spatial_down_levels).then(|| {
                let s = if i < config.temporal_down_levels { 2 } else { 1 };
                Upsample {
                    conv: Conv::new(format!("decoder.level{}.up", i), ch, s * ch, main, 3, [1, 1, 1]),
                    temporal_factor: s,
                }
            });
            let out = config.channels_at(i);
            let blocks = (0..config.resblocks_per_level + 1)
                .map(|j| {
                    let b = res_block(config, &format!("decoder.level{}.res{}", i, j), ch, out);
                    ch = out;
                    b
                })
                .collect();
            levels.push(DecoderLevel { up, blocks });
        }
        Decoder {
            post_quant_conv,
            conv_in,
            mid,
            levels,
            norm_out: Norm::new("decoder.norm_out".into(), ch, config.norm_groups),
            conv_out: Conv::new("decoder.conv_out".into(), ch, PIXEL_CHANNELS, main, 3, [1, 1, 1]),
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.post_quant_conv.specs(out);
        self.conv_in.specs(out);
        self.mid.iter().for_each(|b| b.specs(out));
        for l in &self.levels {
            if let Some(u) = &l.up {
                u.conv.specs(out);
            }
            l.blocks.iter().for_each(|b| b.specs(out));
        }
        self.norm_out.specs(out);
        self.conv_out.specs(out);
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut v = vec![&self.post_quant_conv, &self.conv_in];
        self.mid.iter().for_each(|b| v.extend(b.convs()));
        for l in &self.levels {
            v.extend(l.up.as_ref().map(|u| &u.conv));
            l.blocks.iter().for_each(|b| v.extend(b.convs()));
        }
        v.push(&self.conv_out);
        v
    }

    /// The upsampling conv whose output channels unfold into time, if `conv_name` is one.
    pub fn temporal_upsample_factor(&self, conv_name: &str) -> Option<usize> {
        self.levels
            .iter()
            .filter_map(|l| l.up.as_ref())
            .find(|u| u.conv.name == conv_name)
            .map(|u| u.temporal_factor)
    }

    /// Latent `(B, n, h, w, c)` to pixels `(B, 1 + (n-1)·ρ_t, h·ρ_s, w·ρ_s, 3)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let mut h = self.post_quant_conv.forward(g, p, z)?;
        h = self.conv_in.forward(g, p, h)?;
        for b in &self.mid {
            h = b.forward(g, p, h)?;
        }
        for l in &self.levels {
            if let Some(u) = &l.up {
                h = g.upsample2x(h)?;
                h = u.conv.forward(g, p, h)?;
                if u.temporal_factor > 1 {
                    h = g.channel_to_time(h, u.temporal_factor)?;
                }
            }
            for b in &l.blocks {
                h = b.forward(g, p, h)?;
            }
        }
        h = self.norm_out.forward(g, p, h)?;
        h = g.silu(h)?;
        self.conv_out.forward(g, p, h)
    }
}

/// Graph handles of a posterior: raw `2c`-channel moments and their split.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub moments: Var,
    pub mean: Var,
    pub log_variance: Var,
}

/// `mean + exp(log_variance / 2) · noise`
pub fn reparameterize<T: Real>(g: &mut Graph<T>, post: &PosteriorVars, noise: Tensor<T>) -> Result<Var> {
    let eps = g.input(noise);
    let half = g.affine(post.log_variance, 0.5, 0.0)?;
    let std = g.exp(half)?;
    let scaled = g.mul(std, eps)?;
    g.add(post.mean, scaled)
}

/// Diagonal Gaussian posterior with the noise used to draw its sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior<T> {
    pub mean: Tensor<T>,
    pub log_variance: Tensor<T>,
    pub noise: Tensor<T>,
    pub sample: Tensor<T>,
}

impl<T: Real> LatentPosterior<T> {
    /// Recomputes the sample from the recorded mean, log-variance and noise.
    pub fn resample(&self) -> Tensor<T> {
        let half = T::of_f64(0.5);
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.log_variance.data())
            .zip(self.noise.data())
            .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
            .collect();
        Tensor::from_vec(self.mean.shape(), data).expect("posterior tensors share a shape")
    }
}

/// An image or video VAE (encoder + decoder) described by a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Vae {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Vae {
            config: config.clone(),
            encoder: Encoder::new(config),
            decoder: Decoder::new(config),
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.encoder.specs(&mut out);
        self.decoder.specs(&mut out);
        out
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_store(&self.specs(), &mut rng)
    }

    /// Latent shape for a pixel video shape, after validating the video.
    pub fn latent_shape(&self, video_shape: &[usize]) -> Result<[usize; 5]> {
        let &[b, t, h, w, c] = video_shape else {
            return Err(Error::Shape(format!("expected (B,T,H,W,C) video, got {:?}", video_shape)));
        };
        let (rt, rs) = (self.config.temporal_factor(), self.config.spatial_factor());
        if c != PIXEL_CHANNELS {
            return Err(Error::Shape(format!("video must have {} channels, got {}", PIXEL_CHANNELS, c)));
        }
        if t == 0 || (t - 1) % rt != 0 {
            return Err(Error::Shape(format!(
                "frame count {} must satisfy T ≡ 1 (mod {})",
                t, rt
            )));
        }
        if h == 0 || w == 0 || h % rs != 0 || w % rs != 0 {
            return Err(Error::Shape(format!(
                "height {} and width {} must be positive multiples of {}",
                h, w, rs
            )));
        }
        Ok([b, 1 + (t - 1) / rt, h / rs, w / rs, self.config.latent_channels])
    }

    /// Pixel shape produced by decoding a latent shape, after validating the latent.
    pub fn video_shape(&self, latent_shape: &[usize]) -> Result<[usize; 5]> {
        let &[b, n, h, w, c] = latent_shape else {
            return Err(Error::Shape(format!("expected (B,n,h,w,c) latent, got {:?}", latent_shape)));
        };
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, model expects {}",
                c, self.config.latent_channels
            )));
        }
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty latent {:?}", latent_shape)));
        }
        let (rt, rs) = (self.config.temporal_factor(), self.config.spatial_factor());
        Ok([b, 1 + (n - 1) * rt, h * rs, w * rs, PIXEL_CHANNELS])
    }

    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<PosteriorVars> {
        self.latent_shape(g.shape(x))?;
        self.encoder.forward(g, p, x)
    }

    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        self.video_shape(g.shape(z))?;
        self.decoder.forward(g, p, z)
    }

    /// Encodes a video. Without `noise` the sample equals the mean.
    pub fn encode<T: Real>(
        &self,
        params: &ParamStore<T>,
        video: &Tensor<T>,
        noise: Option<&Tensor<T>>,
    ) -> Result<LatentPosterior<T>> {
        let shape = self.latent_shape(video.shape())?;
        if let Some(n) = noise {
            if n.shape() != shape {
                return Err(Error::Shape(format!(
                    "noise shape {:?} does not match latent {:?}",
                    n.shape(),
                    shape
                )));
            }
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.input(video.clone());
        let post = self.encoder.forward(&mut g, &p, x)?;
        let noise = noise.cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let sample = reparameterize(&mut g, &post, noise.clone())?;
        Ok(LatentPosterior {
            mean: g.value(post.mean).clone(),
            log_variance: g.value(post.log_variance).clone(),
            noise,
            sample: g.value(sample).clone(),
        })
    }

    pub fn decode<T: Real>(&self, params: &ParamStore<T>, latent: &Tensor<T>) -> Result<Tensor<T>> {
        self.video_shape(latent.shape())?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let z = g.input(latent.clone());
        let out = self.decoder.forward(&mut g, &p, z)?;
        Ok(g.value(out).clone())
    }

    /// `decode(encode(video).mean)`
    pub fn reconstruct<T: Real>(&self, params: &ParamStore<T>, video: &Tensor<T>) -> Result<Tensor<T>> {
        let post = self.encode(params, video, None)?;
        self.decode(params, &post.mean)
    }
}

/// Builds a model and its freshly initialized parameters.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(Encoder, Decoder, ParamStore<f32>)> {
    let vae = Vae::new(config)?;
    let params = vae.init_params(seed)?;
    Ok((vae.encoder, vae.decoder, params))
}
