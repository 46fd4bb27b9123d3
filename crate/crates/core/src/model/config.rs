use std::fmt;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Which convolutions carry a temporal extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMix {
    /// Pure image VAE: every kernel has `k_t = 1` and there is no temporal stride.
    All2d,
    /// ResBlocks keep their second conv per-frame; everything else is temporal.
    Hybrid2d3d,
    All3d,
}

impl fmt::Display for ConvMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvMix::All2d => "all-2d",
            ConvMix::Hybrid2d3d => "hybrid-2d3d",
            ConvMix::All3d => "all-3d",
        })
    }
}

impl FromStr for ConvMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-2d" => Ok(ConvMix::All2d),
            "hybrid-2d3d" => Ok(ConvMix::Hybrid2d3d),
            "all-3d" => Ok(ConvMix::All3d),
            other => Err(Error::Config(format!("unknown conv_mix {:?}", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub spatial_down_levels: usize,
    pub temporal_down_levels: usize,
    pub resblocks_per_level: usize,
    pub conv_mix: ConvMix,
    pub temporal_kernel: usize,
    pub discriminator_layers: usize,
    pub norm_groups: usize,
    /// Mid-block self-attention; unsupported, the slot holds a ResBlock instead.
    pub mid_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_channels: 4,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4],
            spatial_down_levels: 3,
            temporal_down_levels: 2,
            resblocks_per_level: 2,
            conv_mix: ConvMix::Hybrid2d3d,
            temporal_kernel: 3,
            discriminator_layers: 4,
            norm_groups: 8,
            mid_attention: false,
        }
    }
}

const KEYS: &[&str] = &[
    "latent_channels",
    "base_channels",
    "channel_multipliers",
    "spatial_down_levels",
    "temporal_down_levels",
    "resblocks_per_level",
    "conv_mix",
    "temporal_kernel",
    "discriminator_layers",
    "norm_groups",
    "mid_attention",
];

impl ModelConfig {
    /// Desk-scale video VAE (hybrid 2D+3D, ρ_s = 8, ρ_t = 4).
    pub fn desk_video() -> Self {
        Self::default()
    }

    /// The image VAE with the same channel topology as [`ModelConfig::desk_video`].
    pub fn desk_image() -> Self {
        ModelConfig::default().to_image()
    }

    /// This topology as a pure image VAE.
    pub fn to_image(&self) -> Self {
        ModelConfig {
            conv_mix: ConvMix::All2d,
            temporal_down_levels: 0,
            temporal_kernel: 1,
            ..self.clone()
        }
    }

    /// This topology as a video VAE with the given conv mix.
    pub fn to_video(&self, conv_mix: ConvMix, temporal_down_levels: usize, temporal_kernel: usize) -> Self {
        ModelConfig {
            conv_mix,
            temporal_down_levels,
            temporal_kernel,
            ..self.clone()
        }
    }

    pub fn spatial_factor(&self) -> usize {
        1 << self.spatial_down_levels
    }

    pub fn temporal_factor(&self) -> usize {
        1 << self.temporal_down_levels
    }

    /// Temporal kernel extent of "3D" convolutions under this config.
    pub fn effective_temporal_kernel(&self) -> usize {
        match self.conv_mix {
            ConvMix::All2d => 1,
            _ => self.temporal_kernel,
        }
    }

    pub fn is_image(&self) -> bool {
        self.conv_mix == ConvMix::All2d
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_channels == 0 || self.base_channels == 0 {
            return bad("latent_channels and base_channels must be positive".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be a non-empty list of positive counts".into());
        }
        if self.spatial_down_levels > self.channel_multipliers.len() {
            return bad(format!(
                "spatial_down_levels {} exceeds the {} levels",
                self.spatial_down_levels,
                self.channel_multipliers.len()
            ));
        }
        if self.temporal_down_levels > self.spatial_down_levels {
            return bad("temporal_down_levels must not exceed spatial_down_levels".into());
        }
        if self.conv_mix == ConvMix::All2d && self.temporal_down_levels != 0 {
            return bad("an all-2d model cannot downsample in time".into());
        }
        if self.conv_mix != ConvMix::All2d && self.temporal_kernel == 0 {
            return bad("temporal_kernel must be positive".into());
        }
        if self.resblocks_per_level == 0 {
            return bad("resblocks_per_level must be positive".into());
        }
        if self.discriminator_layers < 2 {
            return bad("discriminator_layers must be at least 2".into());
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive".into());
        }
        for &m in &self.channel_multipliers {
            if !(self.base_channels * m).is_multiple_of(self.norm_groups) {
                return bad(format!(
                    "norm_groups {} does not divide level width {}",
                    self.norm_groups,
                    self.base_channels * m
                ));
            }
        }
        if self.mid_attention {
            return bad("mid_attention is not supported; the mid block uses ResBlocks".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("latent_channels", self.latent_channels);
        kv.set("base_channels", self.base_channels);
        kv.set(
            "channel_multipliers",
            self.channel_multipliers
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("spatial_down_levels", self.spatial_down_levels);
        kv.set("temporal_down_levels", self.temporal_down_levels);
        kv.set("resblocks_per_level", self.resblocks_per_level);
        kv.set("conv_mix", self.conv_mix);
        kv.set("temporal_kernel", self.temporal_kernel);
        kv.set("discriminator_layers", self.discriminator_layers);
        kv.set("norm_groups", self.norm_groups);
        kv.set("mid_attention", self.mid_attention);
        kv
    }

    /// Reads a config; missing keys take values from `base`.
    pub fn from_kv(kv: &KeyValues, base: &ModelConfig) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let mut c = base.clone();
        if let Some(v) = kv.get("latent_channels")? {
            c.latent_channels = v;
        }
        if let Some(v) = kv.get("base_channels")? {
            c.base_channels = v;
        }
        if let Some(v) = kv.get_list("channel_multipliers")? {
            c.channel_multipliers = v;
        }
        if let Some(v) = kv.get("spatial_down_levels")? {
            c.spatial_down_levels = v;
        }
        if let Some(v) = kv.get("temporal_down_levels")? {
            c.temporal_down_levels = v;
        }
        if let Some(v) = kv.get("resblocks_per_level")? {
            c.resblocks_per_level = v;
        }
        if let Some(v) = kv.get_str("conv_mix") {
            c.conv_mix = v.parse()?;
        }
        if let Some(v) = kv.get("temporal_kernel")? {
            c.temporal_kernel = v;
        }
        if let Some(v) = kv.get("discriminator_layers")? {
            c.discriminator_layers = v;
        }
        if let Some(v) = kv.get("norm_groups")? {
            c.norm_groups = v;
        }
        if let Some(v) = kv.get("mid_attention")? {
            c.mid_attention = v;
        }
        c.validate()?;
        Ok(c)
    }
}
