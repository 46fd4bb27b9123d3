//! Block-wise encoding and decoding of long videos.
//!
//! A video of `1 + n·ρ_t` frames is cut into blocks of `1 + f·ρ_t` frames
//! that share one boundary frame. Block `i > 0` drops its first latent after
//! encoding (and its first frame after decoding), so concatenated results
//! have exactly the un-tiled lengths. Frames can also be cut into an
//! overlapping spatial grid whose tiles are blended with linear ramps.

use crate::error::{Error, Result};
use crate::model::params::ParamStore;
use crate::model::vae::Vae;
use crate::tensor::{Real, Tensor};

/// One temporal block, in latent frames. It covers pixel frames
/// `latent_start·ρ_t ..= (latent_start + latents - 1)·ρ_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalBlock {
    pub latent_start: usize,
    pub latents: usize,
    /// Leading latents (and decoded frames) dropped when assembling.
    pub discard: usize,
}

impl TemporalBlock {
    pub fn frame_start(&self, rho_t: usize) -> usize {
        self.latent_start * rho_t
    }

    pub fn frames(&self, rho_t: usize) -> usize {
        1 + (self.latents - 1) * rho_t
    }
}

/// Requested spatial tiling in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialTiling {
    pub tile: usize,
    pub overlap: usize,
}

/// Tile origins along one axis plus the blend band width, in pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxisTiles {
    pub extent: usize,
    pub tile: usize,
    pub starts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialGrid {
    pub overlap: usize,
    pub rows: AxisTiles,
    pub cols: AxisTiles,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub block_latents: usize,
    pub rho_t: usize,
    pub total_frames: usize,
    pub blocks: Vec<TemporalBlock>,
    pub spatial: Option<SpatialGrid>,
}

impl TilePlan {
    pub fn total_latents(&self) -> usize {
        1 + (self.total_frames - 1) / self.rho_t
    }

    /// Latent frames kept after discards.
    pub fn kept_latents(&self) -> usize {
        self.blocks.iter().map(|b| b.latents - b.discard).sum()
    }

    /// Pixel frames kept after decoding each block and dropping discards.
    pub fn kept_frames(&self) -> usize {
        self.blocks.iter().map(|b| b.frames(self.rho_t) - b.discard).sum()
    }
}

fn axis_tiles(extent: usize, tile: usize, overlap: usize, align: usize) -> Result<AxisTiles> {
    if tile == 0 || !tile.is_multiple_of(align) || !overlap.is_multiple_of(align) || overlap >= tile {
        return Err(Error::Shape(format!(
            "tile {} and overlap {} must be multiples of {} with overlap < tile",
            tile, overlap, align
        )));
    }
    if tile >= extent {
        return Ok(AxisTiles {
            extent,
            tile: extent,
            starts: vec![0],
        });
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < extent).collect();
    starts.push(extent - tile);
    Ok(AxisTiles { extent, tile, starts })
}

/// Plans blocks of `1 + f·ρ_t` frames over `total_frames`, optionally with a
/// spatial grid over `(height, width)` aligned to `spatial_align` pixels.
pub fn plan_tiles(
    total_frames: usize,
    f: usize,
    rho_t: usize,
    spatial: Option<(SpatialTiling, usize, usize, usize)>,
) -> Result<TilePlan> {
    if f == 0 || rho_t == 0 {
        return Err(Error::contract("plan_tiles", "block size and ρ_t must be positive"));
    }
    if total_frames == 0 || !(total_frames - 1).is_multiple_of(rho_t) {
        return Err(Error::Shape(format!(
            "frame count {} must satisfy T ≡ 1 (mod {})",
            total_frames, rho_t
        )));
    }
    let n = (total_frames - 1) / rho_t;
    let mut blocks = Vec::new();
    let mut start = 0;
    loop {
        let len = f.min(n - start);
        blocks.push(TemporalBlock {
            latent_start: start,
            latents: 1 + len,
            discard: usize::from(start > 0),
        });
        start += len;
        if start >= n {
            break;
        }
    }
    let spatial = match spatial {
        None => None,
        Some((s, height, width, align)) => Some(SpatialGrid {
            overlap: s.overlap,
            rows: axis_tiles(height, s.tile, s.overlap, align)?,
            cols: axis_tiles(width, s.tile, s.overlap, align)?,
        }),
    };
    Ok(TilePlan {
        block_latents: f,
        rho_t,
        total_frames,
        blocks,
        spatial,
    })
}

/// Linear-ramp weight of position `p` inside a tile at `start` along an axis:
/// it rises over the overlap band on sides shared with a neighbour.
fn ramp(axis: &AxisTiles, idx: usize, p: usize, band: usize) -> f64 {
    let start = axis.starts[idx];
    let end = start + axis.tile;
    let mut w = 1.0f64;
    if idx > 0 {
        let prev_end = axis.starts[idx - 1] + axis.tile;
        let ov = prev_end.saturating_sub(start).min(band.max(1));
        if ov > 0 {
            w = w.min((p - start + 1) as f64 / (ov + 1) as f64);
        }
    }
    if idx + 1 < axis.starts.len() {
        let next = axis.starts[idx + 1];
        let ov = end.saturating_sub(next).min(band.max(1));
        if ov > 0 {
            w = w.min((end - p) as f64 / (ov + 1) as f64);
        }
    }
    w
}

fn shrink(axis: &AxisTiles, factor: usize) -> AxisTiles {
    AxisTiles {
        extent: axis.extent / factor,
        tile: axis.tile / factor,
        starts: axis.starts.iter().map(|&s| s / factor).collect(),
    }
}

/// Runs `op` on every spatial tile of `input` and blends the tile outputs,
/// whose spatial extents are the tile's scaled by `factor` (`grow`) or
/// divided by it.
fn blend_tiles<T: Real>(
    input: &Tensor<T>,
    grid: &SpatialGrid,
    factor: usize,
    grow: bool,
    mut op: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if grid.rows.starts.len() == 1 && grid.cols.starts.len() == 1 {
        return op(input);
    }
    let (in_rows, in_cols, out_rows, out_cols, band) = if grow {
        let (r, c) = (shrink(&grid.rows, factor), shrink(&grid.cols, factor));
        (r, c, grid.rows.clone(), grid.cols.clone(), grid.overlap)
    } else {
        let (r, c) = (shrink(&grid.rows, factor), shrink(&grid.cols, factor));
        (grid.rows.clone(), grid.cols.clone(), r, c, grid.overlap / factor)
    };

    let mut acc: Option<(Vec<f64>, Vec<f64>, [usize; 5])> = None;
    for (ri, &r0) in in_rows.starts.iter().enumerate() {
        for (ci, &c0) in in_cols.starts.iter().enumerate() {
            let tile = input.crop_hw(r0, in_rows.tile, c0, in_cols.tile)?;
            let out = op(&tile)?;
            let [b, t, th, tw, c] = out.dims5()?;
            let (sum, wsum, dims) = acc.get_or_insert_with(|| {
                let dims = [b, t, out_rows.extent, out_cols.extent, c];
                (vec![0.0; b * t * dims[2] * dims[3] * c], vec![0.0; dims[2] * dims[3]], dims)
            });
            let (oh, ow) = (dims[2], dims[3]);
            let (y0, x0) = (out_rows.starts[ri], out_cols.starts[ci]);
            for y in 0..th {
                let wy = ramp(&out_rows, ri, y0 + y, band);
                for x in 0..tw {
                    let wgt = wy * ramp(&out_cols, ci, x0 + x, band);
                    wsum[(y0 + y) * ow + x0 + x] += wgt;
                    for bt in 0..b * t {
                        let src = ((bt * th + y) * tw + x) * c;
                        let dst = ((bt * oh + y0 + y) * ow + x0 + x) * c;
                        for k in 0..c {
                            sum[dst + k] += wgt * out.data()[src + k].as_f64();
                        }
                    }
                }
            }
        }
    }
    let (sum, wsum, dims) = acc.expect("grid has at least one tile");
    let (oh, ow, c) = (dims[2], dims[3], dims[4]);
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, v)| T::of_f64(v / wsum[(i / c) % (oh * ow)]))
        .collect();
    Tensor::from_vec(&dims, data)
}

fn check_plan(vae: &Vae, plan: &TilePlan) -> Result<()> {
    if plan.rho_t != vae.config.temporal_factor() {
        return Err(Error::Shape(format!(
            "plan uses ρ_t = {} but the model compresses time by {}",
            plan.rho_t,
            vae.config.temporal_factor()
        )));
    }
    if let Some(g) = &plan.spatial {
        let rs = vae.config.spatial_factor();
        if g.rows.tile % rs != 0 || g.cols.tile % rs != 0 || g.overlap % rs != 0 {
            return Err(Error::Shape(format!("spatial tiles must be multiples of {}", rs)));
        }
    }
    Ok(())
}

/// Encodes block by block. `fetch(start, frames)` supplies pixel frames and
/// `sink` receives the kept posterior means of each block in order, so only
/// one block is resident at a time.
pub fn tiled_encode_with<T: Real>(
    vae: &Vae,
    params: &ParamStore<T>,
    plan: &TilePlan,
    mut fetch: impl FnMut(usize, usize) -> Result<Tensor<T>>,
    mut sink: impl FnMut(Tensor<T>) -> Result<()>,
) -> Result<()> {
    check_plan(vae, plan)?;
    let rs = vae.config.spatial_factor();
    for b in &plan.blocks {
        let frames = b.frames(plan.rho_t);
        let video = fetch(b.frame_start(plan.rho_t), frames)?;
        if video.dims5()?[1] != frames {
            return Err(Error::Shape(format!("block needs {} frames, got {:?}", frames, video.shape())));
        }
        let encode = |x: &Tensor<T>| vae.encode(params, x, None).map(|p| p.mean);
        let latent = match &plan.spatial {
            None => encode(&video)?,
            Some(grid) => {
                check_grid(grid, &video)?;
                blend_tiles(&video, grid, rs, false, encode)?
            }
        };
        let keep = b.latents - b.discard;
        sink(latent.slice_time(b.discard, keep)?)?;
    }
    Ok(())
}

fn check_grid<T: Real>(grid: &SpatialGrid, video: &Tensor<T>) -> Result<()> {
    let [_, _, h, w, _] = video.dims5()?;
    if (grid.rows.extent, grid.cols.extent) != (h, w) {
        return Err(Error::Shape(format!(
            "plan covers {}x{} pixels but the video is {}x{}",
            grid.rows.extent, grid.cols.extent, h, w
        )));
    }
    Ok(())
}

/// Tiled encoding of an in-memory video into posterior means.
pub fn tiled_encode<T: Real>(vae: &Vae, params: &ParamStore<T>, video: &Tensor<T>, plan: &TilePlan) -> Result<Tensor<T>> {
    let [_, t, _, _, _] = video.dims5()?;
    if t != plan.total_frames {
        return Err(Error::Shape(format!(
            "plan covers {} frames but the video has {}",
            plan.total_frames, t
        )));
    }
    let mut parts = Vec::new();
    tiled_encode_with(vae, params, plan, |s, n| video.slice_time(s, n), |z| {
        parts.push(z);
        Ok(())
    })?;
    Tensor::concat_time(&parts.iter().collect::<Vec<_>>())
}

/// Decodes block by block; `sink` receives the kept frames of each block.
pub fn tiled_decode_with<T: Real>(
    vae: &Vae,
    params: &ParamStore<T>,
    plan: &TilePlan,
    latent: &Tensor<T>,
    mut sink: impl FnMut(Tensor<T>) -> Result<()>,
) -> Result<()> {
    check_plan(vae, plan)?;
    let [_, n, h, w, _] = latent.dims5()?;
    if n != plan.total_latents() {
        return Err(Error::Shape(format!(
            "plan covers {} latent frames but the latent has {}",
            plan.total_latents(),
            n
        )));
    }
    let rs = vae.config.spatial_factor();
    if let Some(grid) = &plan.spatial {
        if (grid.rows.extent, grid.cols.extent) != (h * rs, w * rs) {
            return Err(Error::Shape(format!(
                "plan covers {}x{} pixels but the latent decodes to {}x{}",
                grid.rows.extent,
                grid.cols.extent,
                h * rs,
                w * rs
            )));
        }
    }
    for b in &plan.blocks {
        let z = latent.slice_time(b.latent_start, b.latents)?;
        let decode = |z: &Tensor<T>| vae.decode(params, z);
        let video = match &plan.spatial {
            None => decode(&z)?,
            Some(grid) => blend_tiles(&z, grid, rs, true, decode)?,
        };
        let frames = video.dims5()?[1];
        sink(video.slice_time(b.discard, frames - b.discard)?)?;
    }
    Ok(())
}

pub fn tiled_decode<T: Real>(vae: &Vae, params: &ParamStore<T>, latent: &Tensor<T>, plan: &TilePlan) -> Result<Tensor<T>> {
    let mut parts = Vec::new();
    tiled_decode_with(vae, params, plan, latent, |x| {
        parts.push(x);
        Ok(())
    })?;
    Tensor::concat_time(&parts.iter().collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    /// Causal conv with `taps` temporal taps and temporal stride `stride`.
    Conv { taps: usize, stride: usize },
    /// Channel-to-time unfolding by `factor`.
    Unfold { factor: usize },
}

fn encoder_stages(vae: &Vae) -> Vec<Stage> {
    vae.encoder
        .convs()
        .into_iter()
        .map(|c| Stage::Conv {
            taps: c.kt,
            stride: c.geometry.stride[0],
        })
        .collect()
}

fn decoder_stages(vae: &Vae) -> Vec<Stage> {
    let mut out = Vec::new();
    for c in vae.decoder.convs() {
        out.push(Stage::Conv {
            taps: c.kt,
            stride: c.geometry.stride[0],
        });
        if let Some(s) = vae.decoder.temporal_upsample_factor(&c.name).filter(|&s| s > 1) {
            out.push(Stage::Unfold { factor: s });
        }
    }
    out
}

/// Whether output frame `idx` of a block sees only frames inside the block
/// at every stage, walking the stages backwards.
fn within_block(stages: &[Stage], mut idx: i64) -> bool {
    for s in stages.iter().rev() {
        match *s {
            Stage::Conv { taps, stride } => idx = idx * stride as i64 - (taps as i64 - 1),
            Stage::Unfold { factor } => {
                if idx > 0 {
                    idx = (idx + factor as i64 - 1) / factor as i64;
                }
            }
        }
        if idx < 0 {
            return false;
        }
    }
    true
}

/// Smallest block-local latent index whose temporal receptive field lies
/// entirely inside its block; such latents match un-tiled encoding exactly.
pub fn encoder_exact_from(vae: &Vae) -> usize {
    let stages = encoder_stages(vae);
    (0..).find(|&j| within_block(&stages, j as i64)).unwrap()
}

/// Smallest block-local decoded frame index whose receptive field lies
/// entirely inside its block's latents.
pub fn decoder_exact_from(vae: &Vae) -> usize {
    let stages = decoder_stages(vae);
    (0..).find(|&k| within_block(&stages, k as i64)).unwrap()
}

/// Per latent frame of a tiled encoding: true when it must equal the
/// un-tiled latent exactly.
pub fn exact_latent_mask(vae: &Vae, plan: &TilePlan) -> Vec<bool> {
    let from = encoder_exact_from(vae);
    plan.blocks
        .iter()
        .flat_map(|b| (b.discard..b.latents).map(move |j| b.latent_start == 0 || j >= from))
        .collect()
}

/// Per decoded frame of a tiled decoding: true when it must equal the
/// un-tiled frame exactly.
pub fn exact_frame_mask(vae: &Vae, plan: &TilePlan) -> Vec<bool> {
    let from = decoder_exact_from(vae);
    let rho = plan.rho_t;
    plan.blocks
        .iter()
        .flat_map(|b| (b.discard..b.frames(rho)).map(move |k| b.latent_start == 0 || k >= from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_33_frames_f2() {
        let p = plan_tiles(33, 2, 4, None).unwrap();
        let starts: Vec<usize> = p.blocks.iter().map(|b| b.frame_start(4)).collect();
        assert_eq!(starts, vec![0, 8, 16, 24]);
        assert!(p.blocks.iter().all(|b| b.frames(4) == 9));
        assert_eq!(p.blocks.iter().map(|b| b.discard).collect::<Vec<_>>(), vec![0, 1, 1, 1]);
        assert_eq!(p.kept_latents(), 9);
        assert_eq!(p.kept_frames(), 33);
    }

    #[test]
    fn short_tail_shrinks() {
        let p = plan_tiles(21, 2, 4, None).unwrap();
        assert_eq!(p.blocks.last().unwrap().latents, 2);
        assert_eq!(p.kept_latents(), 6);
    }

    #[test]
    fn single_block() {
        let p = plan_tiles(9, 2, 4, None).unwrap();
        assert_eq!(p.blocks.len(), 1);
        assert_eq!(p.blocks[0].discard, 0);
    }

    #[test]
    fn axis_tiles_cover_extent() {
        let a = axis_tiles(40, 16, 8, 8).unwrap();
        assert_eq!(a.starts, vec![0, 8, 16, 24]);
        let a = axis_tiles(44, 16, 8, 4).unwrap();
        assert_eq!(*a.starts.last().unwrap() + 16, 44);
        assert!(axis_tiles(40, 16, 16, 8).is_err());
    }

    #[test]
    fn receptive_field_walk() {
        let stages = [Stage::Conv { taps: 3, stride: 1 }, Stage::Conv { taps: 3, stride: 2 }];
        // output j needs input 2j - 2 - 2 >= 0
        assert!(!within_block(&stages, 1));
        assert!(within_block(&stages, 2));
        let up = [Stage::Unfold { factor: 2 }, Stage::Conv { taps: 2, stride: 1 }];
        // frame k needs frame k-1 at the fine rate, which maps to ceil((k-1)/2)
        assert!(!within_block(&up, 0));
        assert!(within_block(&up, 1));
    }
}
