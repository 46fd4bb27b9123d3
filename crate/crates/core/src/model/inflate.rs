//! Initializes a video VAE from image-VAE weights.
//!
//! Each 2D kernel is copied into the last temporal tap of the matching 3D
//! kernel and every other tap is zero. Together with reflect-first-frame
//! padding this makes the untrained video model reproduce the image model on
//! single frames. Temporal-upsampling convs (whose outputs unfold into `s`
//! frames) receive the 2D kernel in each of their `s` output-channel groups.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::discriminator::Discriminator;
use crate::model::layers::ParamSpec;
use crate::model::params::ParamStore;
use crate::model::vae::Vae;
use crate::tensor::{Real, Tensor};

/// Parameter layout of `config`, plus the discriminator when `with_disc`.
fn layout(config: &ModelConfig, with_disc: bool) -> Result<Vec<ParamSpec>> {
    let mut specs = Vae::new(config)?.specs();
    if with_disc {
        specs.extend(Discriminator::new(config)?.specs());
    }
    Ok(specs)
}

fn inflate_tensor<T: Real>(src: &Tensor<T>, target: &[usize]) -> Option<Tensor<T>> {
    if src.shape() == target {
        return Some(src.clone());
    }
    match (src.shape(), target) {
        (&[co], &[sco]) if sco % co == 0 => {
            let s = sco / co;
            let data = (0..s).flat_map(|_| src.data().iter().copied()).collect();
            Tensor::from_vec(target, data).ok()
        }
        (&[co, ci, 1, kh, kw], &[sco, tci, kt, tkh, tkw])
            if sco % co == 0 && ci == tci && kh == tkh && kw == tkw && kt >= 1 =>
        {
            let s = sco / co;
            let plane = kh * kw;
            let mut out = Tensor::zeros(target);
            let dst = out.data_mut();
            for grp in 0..s {
                for o in 0..co {
                    for i in 0..ci {
                        let from = (o * ci + i) * plane;
                        let to = (((grp * co + o) * ci + i) * kt + (kt - 1)) * plane;
                        dst[to..to + plane].copy_from_slice(&src.data()[from..from + plane]);
                    }
                }
            }
            Some(out)
        }
        _ => None,
    }
}

/// Inflates image-VAE parameters (optionally including `disc.*` discriminator
/// weights) into the layout described by `video_config`.
pub fn inflate_2d_to_3d<T: Real>(
    image_params: &ParamStore<T>,
    image_config: &ModelConfig,
    video_config: &ModelConfig,
) -> Result<ParamStore<T>> {
    image_config.validate()?;
    video_config.validate()?;
    if !image_config.is_image() {
        return Err(Error::Config("inflation source must be an all-2d model".into()));
    }
    let with_disc = image_params.names().any(|n| n.starts_with("disc."));
    let image_layout = layout(image_config, with_disc)?;
    let video_layout = layout(video_config, with_disc)?;

    let mut unmatched = Vec::new();
    for spec in &image_layout {
        match image_params.get(&spec.name) {
            Some(t) if t.shape() == spec.shape.as_slice() => {}
            _ => unmatched.push(format!("{} (image)", spec.name)),
        }
    }
    let mut out = ParamStore::new();
    for spec in &video_layout {
        let inflated = image_params
            .get(&spec.name)
            .and_then(|src| inflate_tensor(src, &spec.shape));
        match inflated {
            Some(t) => out.insert(&spec.name, t)?,
            None => unmatched.push(spec.name.clone()),
        }
    }
    for name in image_params.names() {
        if !video_layout.iter().any(|s| s.name == name) {
            unmatched.push(format!("{} (image)", name));
        }
    }
    if !unmatched.is_empty() {
        unmatched.sort();
        unmatched.dedup();
        return Err(Error::Inflation { unmatched });
    }
    Ok(out)
}
