//! Fast invariant suite behind the `selftest` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{psnr, read_checkpoint, read_raw_video, ssim, write_checkpoint, write_raw_video};
use crate::error::Result;
use crate::gradcheck::{grad_check_with, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::kernels::conv::{conv3d_forward, ConvGeometry, TemporalPad};
use crate::model::config::{ConvMix, ModelConfig};
use crate::model::inflate::inflate_2d_to_3d;
use crate::model::params::{count_params, ParamStore};
use crate::model::vae::Vae;
use crate::objective::losses::{hinge_disc_term, kl_term};
use crate::objective::optim::{AdamW, AdamWConfig};
use crate::regularization::{map_psi, reg_decoder_term, reg_encoder_term, FrozenImage, PsiKind, PsiSpec};
use crate::tensor::Tensor;
use crate::tiling::{plan_tiles, tiled_decode, tiled_encode};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("conv3d-matches-direct-sum", conv_direct),
    ("gradients-match-finite-differences", gradients),
    ("compression-contract", compression),
    ("inflation-identity", inflation),
    ("encoder-causality", causality),
    ("hybrid-parameter-ratio", hybrid_ratio),
    ("closed-form-losses", closed_form),
    ("psi-contract", psi_contract),
    ("tiling-single-block-identity", tiling_identity),
    ("format-round-trips", round_trips),
    ("metric-identities", metrics),
    ("adamw-zero-lr-identity", adamw_identity),
];

/// Runs every check; a check that errors counts as failed.
pub fn run_selftest() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| match f() {
            Ok((passed, detail)) => CheckOutcome { name, passed, detail },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: format!("error: {}", e),
            },
        })
        .collect()
}

/// A narrow hybrid video model that keeps `ρ_t = 4` and `ρ_s = 8`.
pub fn tiny_video_config() -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        resblocks_per_level: 1,
        norm_groups: 4,
        ..ModelConfig::desk_video()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn conv_direct() -> Result<(bool, String)> {
    let mut r = rng(1);
    let (b, t, h, w, ci, co, kt, k) = (1, 4, 5, 6, 3, 2, 2, 3);
    let x = Tensor::<f64>::randn(&[b, t, h, w, ci], 1.0, &mut r);
    let wt = Tensor::<f64>::randn(&[co, ci, kt, k, k], 1.0, &mut r);
    let bias = Tensor::<f64>::randn(&[co], 1.0, &mut r);
    let geom = ConvGeometry::new([1, 2, 1], [1, 1], TemporalPad::Zero);
    let y = conv3d_forward(&x, &wt, &bias, &geom)?;
    let [_, to, ho, wo, _] = y.dims5()?;
    let xv = |tt: isize, yy: isize, xx: isize, c: usize| -> f64 {
        if tt < 0 || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data()[(((tt as usize) * h + yy as usize) * w + xx as usize) * ci + c]
        }
    };
    let mut worst = 0.0f64;
    for ot in 0..to {
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..co {
                    let mut acc = bias.data()[o];
                    for c in 0..ci {
                        for dt in 0..kt {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let wv = wt.data()[(((o * ci + c) * kt + dt) * k + dy) * k + dx];
                                    let tt = ot as isize + dt as isize - (kt as isize - 1);
                                    let yy = (oy * 2 + dy) as isize - 1;
                                    let xx = (ox + dx) as isize - 1;
                                    acc += wv * xv(tt, yy, xx, c);
                                }
                            }
                        }
                    }
                    let got = y.data()[((ot * ho + oy) * wo + ox) * co + o];
                    worst = worst.max((got - acc).abs());
                }
            }
        }
    }
    Ok((worst < 1e-12, format!("max_abs_err={:.2e}", worst)))
}

fn gradients() -> Result<(bool, String)> {
    let reports = gradient_suite()?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.1.passed).map(|r| r.0).collect();
    let worst = reports.iter().map(|r| r.1.max_rel_error).fold(0.0, f64::max);
    Ok((
        failed.is_empty(),
        format!("checks={} worst_rel_err={:.2e} failed=[{}]", reports.len(), worst, failed.join(",")),
    ))
}

type GradCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// `Σ w ⊙ y` with fixed random weights, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::rand_uniform(g.shape(y), -1.0, 1.0, &mut rng(seed));
    let w = g.input(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Uniform values on `[-2, 2]` kept at least 0.05 away from every kink.
fn away_from(shape: &[usize], kinks: &[f64], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -2.0, 2.0, &mut rng(seed)).map(|mut v: f64| {
        for &k in kinks {
            if (v - k).abs() < 0.05 {
                v = if v >= k { k + 0.05 } else { k - 0.05 };
            }
        }
        v
    })
}

fn unary(name: &'static str, x: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Result<Var>, seed: u64) -> GradCase {
    (
        name,
        vec![x],
        Box::new(move |g, v| {
            let y = op(g, v[0])?;
            weighted_sum(g, y, seed)
        }),
    )
}

fn binary(name: &'static str, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>, seed: u64) -> GradCase {
    let a = Tensor::rand_uniform(&[1, 2, 2, 3, 2], -1.0, 1.0, &mut rng(seed));
    let b = Tensor::rand_uniform(&[1, 2, 2, 3, 2], -1.0, 1.0, &mut rng(seed + 1));
    (
        name,
        vec![a, b],
        Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            weighted_sum(g, y, seed + 2)
        }),
    )
}

fn op_cases() -> Result<Vec<GradCase>> {
    let mut cases: Vec<GradCase> = Vec::new();
    let pads = [
        ("conv3d-reflect-first", TemporalPad::ReflectFirstFrame, [1, 1, 1], [1, 1]),
        ("conv3d-zero-strided", TemporalPad::Zero, [2, 2, 1], [1, 0]),
        ("conv3d-valid-strided", TemporalPad::None, [1, 2, 2], [0, 1]),
    ];
    for (i, (name, temporal, stride, pad)) in pads.into_iter().enumerate() {
        let i = i as u64;
        let x = Tensor::rand_uniform(&[2, 5, 5, 4, 3], -1.0, 1.0, &mut rng(100 + i));
        let w = Tensor::rand_uniform(&[2, 3, 3, 3, 2], -0.5, 0.5, &mut rng(110 + i));
        let b = Tensor::rand_uniform(&[2], -0.5, 0.5, &mut rng(120 + i));
        let geom = ConvGeometry::new(stride, pad, temporal);
        cases.push((
            name,
            vec![x, w, b],
            Box::new(move |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], geom)?;
                weighted_sum(g, y, 130 + i)
            }),
        ));
    }
    cases.push((
        "group_norm",
        vec![
            Tensor::rand_uniform(&[2, 3, 3, 3, 6], -1.0, 1.0, &mut rng(140)),
            Tensor::rand_uniform(&[6], 0.5, 1.5, &mut rng(141)),
            Tensor::rand_uniform(&[6], -0.5, 0.5, &mut rng(142)),
        ],
        Box::new(|g, v| {
            let y = g.group_norm(v[0], v[1], v[2], 3, 1e-6)?;
            weighted_sum(g, y, 143)
        }),
    ));

    let shape = [1, 2, 3, 3, 2];
    let smooth = Tensor::rand_uniform(&shape, -2.0, 2.0, &mut rng(150));
    let kinked = away_from(&shape, &[0.0], 151);
    cases.push(unary("silu", smooth.clone(), |g, x| g.silu(x), 152));
    cases.push(unary("exp", smooth.clone(), |g, x| g.exp(x), 153));
    cases.push(unary("square", smooth.clone(), |g, x| g.square(x), 154));
    cases.push(unary("affine", smooth, |g, x| g.affine(x, -1.7, 0.3), 155));
    cases.push(unary("relu", kinked.clone(), |g, x| g.relu(x), 156));
    cases.push(unary("leaky_relu", kinked.clone(), |g, x| g.leaky_relu(x, 0.2), 157));
    cases.push(unary("abs", kinked, |g, x| g.abs(x), 158));
    cases.push(unary(
        "clamp",
        away_from(&shape, &[-0.5, 0.75], 159),
        |g, x| g.clamp(x, -0.5, 0.75),
        160,
    ));
    cases.push(binary("add", |g, a, b| g.add(a, b), 161));
    cases.push(binary("sub", |g, a, b| g.sub(a, b), 164));
    cases.push(binary("mul", |g, a, b| g.mul(a, b), 167));

    let wide = Tensor::rand_uniform(&[2, 3, 2, 2, 8], -1.0, 1.0, &mut rng(170));
    cases.push(unary("slice_channels", wide.clone(), |g, x| g.slice_channels(x, 2, 4), 171));
    cases.push(unary("slice_time", wide.clone(), |g, x| g.slice_time(x, 1, 2), 172));
    cases.push(unary("channel_to_time", wide.clone(), |g, x| g.channel_to_time(x, 4), 173));
    cases.push(unary("upsample2x", wide.clone(), |g, x| g.upsample2x(x), 174));
    cases.push((
        "concat_time",
        vec![wide, Tensor::rand_uniform(&[2, 2, 2, 2, 8], -1.0, 1.0, &mut rng(175))],
        Box::new(|g, v| {
            let c = g.concat_time(&[v[0], v[1], v[0]])?;
            weighted_sum(g, c, 176)
        }),
    ));

    let a = Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng(180));
    let b = Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng(181));
    cases.push((
        "sum",
        vec![a.clone()],
        Box::new(|g, v| {
            let s = g.square(v[0])?;
            g.sum(s)
        }),
    ));
    cases.push((
        "mean",
        vec![a.clone()],
        Box::new(|g, v| {
            let s = g.exp(v[0])?;
            g.mean(s)
        }),
    ));
    cases.push(("mse_loss", vec![a, b.clone()], Box::new(|g, v| g.mse_loss(v[0], v[1]))));
    let delta = away_from(&shape, &[0.0], 182);
    let far = Tensor::from_vec(&shape, b.data().iter().zip(delta.data()).map(|(x, d)| x + d).collect())?;
    cases.push(("l1_loss", vec![far, b], Box::new(|g, v| g.l1_loss(v[0], v[1]))));
    Ok(cases)
}

/// Narrow 64-bit image and video models with `ρ_s = ρ_t = 2`.
fn micro_models() -> Result<(Vae, ParamStore<f64>, Vae, ParamStore<f64>)> {
    let video_cfg = ModelConfig {
        latent_channels: 2,
        base_channels: 4,
        channel_multipliers: vec![1, 1],
        spatial_down_levels: 1,
        temporal_down_levels: 1,
        resblocks_per_level: 1,
        temporal_kernel: 2,
        discriminator_layers: 2,
        norm_groups: 2,
        ..ModelConfig::desk_video()
    };
    let image = Vae::new(&video_cfg.to_image())?;
    let ip = image.init_params::<f64>(190)?;
    let video = Vae::new(&video_cfg)?;
    let vp = video.init_params::<f64>(191)?;
    Ok((image, ip, video, vp))
}

fn regularization_cases() -> Result<Vec<GradCase>> {
    let x = Tensor::<f64>::rand_uniform(&[1, 5, 4, 4, 3], -1.0, 1.0, &mut rng(192));
    let mut cases: Vec<GradCase> = Vec::new();

    let (image, ip, video, vp) = micro_models()?;
    let target = map_psi(&PsiSpec::new(PsiKind::Slice, 2, 0), &x)?;
    let names = ["encoder.conv_out.weight", "encoder.level0.res0.conv_a.weight", "encoder.conv_in.bias"];
    let inputs = names.iter().map(|n| vp.get(n).cloned()).collect::<Option<Vec<_>>>();
    let xc = x.clone();
    cases.push((
        "reg-decoder-loss",
        inputs.ok_or_else(|| crate::Error::Config("micro model lacks a probed parameter".into()))?,
        Box::new(move |g, vars| {
            let mut bound = vp.bind(g, false);
            for (n, &v) in names.iter().zip(vars) {
                bound.insert(n, v);
            }
            let frozen_params = ip.bind(g, false);
            let xv = g.input(xc.clone());
            let post = video.encode_graph(g, &bound, xv)?;
            let frozen = FrozenImage {
                vae: &image,
                params: &frozen_params,
            };
            reg_decoder_term(g, &frozen, post.mean, &target)
        }),
    ));

    let (image, ip, video, vp) = micro_models()?;
    let mapped = map_psi(&PsiSpec::new(PsiKind::Average, 2, 0), &x)?;
    let names = ["decoder.conv_out.weight", "decoder.conv_in.weight", "decoder.norm_out.gain"];
    let inputs = names.iter().map(|n| vp.get(n).cloned()).collect::<Option<Vec<_>>>();
    cases.push((
        "reg-encoder-loss",
        inputs.ok_or_else(|| crate::Error::Config("micro model lacks a probed parameter".into()))?,
        Box::new(move |g, vars| {
            let mut bound = vp.bind(g, false);
            for (n, &v) in names.iter().zip(vars) {
                bound.insert(n, v);
            }
            let frozen_params = ip.bind(g, false);
            let xv = g.input(x.clone());
            let frozen = FrozenImage {
                vae: &image,
                params: &frozen_params,
            };
            reg_encoder_term(g, &frozen, &video, &bound, xv, &mapped)
        }),
    ));
    Ok(cases)
}

/// Finite-difference checks at relative tolerance 1e-4 for every
/// differentiable graph operation and both latent alignment losses.
pub fn gradient_suite() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let opts = GradCheckOptions {
        max_probes: Some(40),
        ..Default::default()
    };
    let mut cases = op_cases()?;
    cases.extend(regularization_cases()?);
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, grad_check_with(|g, v| f(g, v), &inputs, 1e-4, &opts)?)))
        .collect()
}

fn compression() -> Result<(bool, String)> {
    let vae = Vae::new(&tiny_video_config())?;
    let p = vae.init_params::<f32>(3)?;
    let mut ok = true;
    for frames in [1, 5, 9, 17] {
        let x = Tensor::<f32>::zeros(&[1, frames, 16, 16, 3]);
        let z = vae.encode(&p, &x, None)?.mean;
        let y = vae.decode(&p, &z)?;
        ok &= z.shape()[1] == 1 + (frames - 1) / 4 && y.shape() == x.shape();
    }
    Ok((ok, "frames=1,5,9,17".into()))
}

fn inflation() -> Result<(bool, String)> {
    let video_cfg = tiny_video_config();
    let image_cfg = video_cfg.to_image();
    let image = Vae::new(&image_cfg)?;
    let video = Vae::new(&video_cfg)?;
    let ip = image.init_params::<f32>(4)?;
    let vp = inflate_2d_to_3d(&ip, &image_cfg, &video_cfg)?;
    let x = Tensor::<f32>::rand_uniform(&[2, 1, 16, 16, 3], -1.0, 1.0, &mut rng(5));
    let mean = image.encode(&ip, &x, None)?.mean.max_abs_diff(&video.encode(&vp, &x, None)?.mean)?;
    let rec = image.reconstruct(&ip, &x)?.max_abs_diff(&video.reconstruct(&vp, &x)?)?;
    Ok((mean <= 1e-5 && rec <= 1e-4, format!("mean={:.2e} rec={:.2e}", mean, rec)))
}

fn causality() -> Result<(bool, String)> {
    let vae = Vae::new(&tiny_video_config())?;
    let p = vae.init_params::<f32>(6)?;
    let x = Tensor::<f32>::rand_uniform(&[1, 9, 16, 16, 3], -1.0, 1.0, &mut rng(7));
    let mut y = x.clone();
    let frame = 16 * 16 * 3;
    for v in &mut y.data_mut()[5 * frame..] {
        *v = -*v;
    }
    let a = vae.encode(&p, &x, None)?.mean;
    let b = vae.encode(&p, &y, None)?.mean;
    let diff = a.slice_time(0, 2)?.max_abs_diff(&b.slice_time(0, 2)?)?;
    Ok((diff == 0.0, format!("latents_0_1_diff={:.2e}", diff)))
}

fn hybrid_ratio() -> Result<(bool, String)> {
    let desk = ModelConfig::desk_video();
    let count = |mix| -> Result<usize> {
        let cfg = desk.to_video(mix, desk.temporal_down_levels, desk.temporal_kernel);
        Ok(count_params(&Vae::new(&cfg)?.init_params::<f32>(0)?))
    };
    let ratio = count(ConvMix::Hybrid2d3d)? as f64 / count(ConvMix::All3d)? as f64;
    Ok(((0.60..=0.80).contains(&ratio), format!("ratio={:.4}", ratio)))
}

fn closed_form() -> Result<(bool, String)> {
    let mut g = Graph::<f64>::new();
    let zeros = g.input(Tensor::zeros(&[6]));
    let ones = g.input(Tensor::full(&[6], 1.0));
    let kl0 = kl_term(&mut g, zeros, zeros)?;
    let kl1 = kl_term(&mut g, ones, zeros)?;
    let real = g.input(Tensor::from_vec(&[3], vec![-2.0, 0.5, 3.0])?);
    let fake = g.input(Tensor::from_vec(&[3], vec![1.5, -0.25, -4.0])?);
    let hinge = hinge_disc_term(&mut g, real, fake)?;
    let oracle = (3.0 + 0.5 + 0.0) / 3.0 + (2.5 + 0.75 + 0.0) / 3.0;
    let e = [
        g.value(kl0).item().abs(),
        (g.value(kl1).item() - 0.5).abs(),
        (g.value(hinge).item() - oracle).abs(),
    ];
    Ok((
        e[0] <= 1e-7 && e[1] <= 1e-7 && e[2] <= 1e-6,
        format!("kl0={:.1e} kl1={:.1e} hinge={:.1e}", e[0], e[1], e[2]),
    ))
}

fn psi_contract() -> Result<(bool, String)> {
    let mut ok = true;
    for rho in [1, 2, 4] {
        for n in [0, 1, 3] {
            let frames = 1 + n * rho;
            let x = Tensor::<f32>::rand_uniform(&[1, frames, 2, 2, 3], -1.0, 1.0, &mut rng(frames as u64));
            for kind in PsiKind::ALL {
                for seed in 0..10 {
                    let spec = PsiSpec::new(kind, rho, seed);
                    let y = map_psi(&spec, &x)?;
                    ok &= y.shape()[1] == spec.output_frames(frames)?;
                    ok &= y.slice_time(0, 1)? == x.slice_time(0, 1)?;
                    if kind == PsiKind::Random {
                        let idx = spec.indices(frames)?;
                        ok &= idx.iter().enumerate().skip(1).all(|(j, &i)| i > (j - 1) * rho && i <= j * rho);
                    }
                }
            }
            let c = Tensor::<f32>::full(&[1, frames, 2, 2, 3], 0.25);
            let avg = map_psi(&PsiSpec::new(PsiKind::Average, rho, 0), &c)?;
            ok &= avg.data().iter().all(|&v| v == 0.25);
        }
    }
    Ok((ok, "rho=1,2,4 n=0,1,3".into()))
}

fn tiling_identity() -> Result<(bool, String)> {
    let vae = Vae::new(&tiny_video_config())?;
    let p = vae.init_params::<f32>(8)?;
    let x = Tensor::<f32>::rand_uniform(&[1, 9, 16, 16, 3], -1.0, 1.0, &mut rng(9));
    let plan = plan_tiles(9, 2, 4, None)?;
    let z = vae.encode(&p, &x, None)?.mean;
    let zt = tiled_encode(&vae, &p, &x, &plan)?;
    let y = vae.decode(&p, &z)?;
    let yt = tiled_decode(&vae, &p, &z, &plan)?;
    Ok((z == zt && y == yt, format!("blocks={}", plan.blocks.len())))
}

fn round_trips() -> Result<(bool, String)> {
    let cfg = tiny_video_config();
    let p: ParamStore<f32> = Vae::new(&cfg)?.init_params(10)?;
    let (q, cfg2) = read_checkpoint(&write_checkpoint(&p, &cfg)?)?;
    let same_params = p.iter().zip(q.iter()).all(|((a, x), (b, y))| {
        a == b && x.value.data().iter().map(|v| v.to_bits()).eq(y.value.data().iter().map(|v| v.to_bits()))
    });
    let v = Tensor::<f32>::rand_uniform(&[1, 5, 4, 6, 3], -1.0, 1.0, &mut rng(11));
    let w = read_raw_video(&write_raw_video(&v)?)?;
    let mut bad = write_raw_video(&v)?;
    bad[0] ^= 0xFF;
    let rejected = read_raw_video(&bad).is_err();
    Ok((
        same_params && p.len() == q.len() && cfg == cfg2 && v == w && rejected,
        format!("tensors={}", p.len()),
    ))
}

fn metrics() -> Result<(bool, String)> {
    let a = Tensor::<f64>::rand_uniform(&[12, 12, 3], -1.0, 1.0, &mut rng(12));
    let b = a.map(|v| v + 0.1);
    let p_same = psnr(&a, &a, 2.0)?;
    let p = psnr(&a, &b, 2.0)?;
    let expect = 10.0 * (4.0f64 / 0.01).log10();
    let s = ssim(&a, &a, 2.0)?;
    Ok((
        p_same.is_infinite() && (p - expect).abs() < 1e-9 && (s - 1.0).abs() < 1e-12,
        format!("psnr={:.4} ssim={:.6}", p, s),
    ))
}

fn adamw_identity() -> Result<(bool, String)> {
    let mut p = ParamStore::<f32>::new();
    p.insert("w", Tensor::rand_uniform(&[16], -1.0, 1.0, &mut rng(13)))?;
    let before = p.get("w").cloned();
    for (_, param) in p.iter_mut() {
        param.grad = Some(Tensor::full(&[16], 0.5));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.0,
        ..Default::default()
    })?;
    opt.step(&mut p, 1.0);
    Ok((p.get("w").cloned() == before, "lr=0".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for o in run_selftest() {
            assert!(o.passed, "{}", o.line());
        }
    }
}
