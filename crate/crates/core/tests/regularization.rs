use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vidvae::gradcheck::{grad_check_with, GradCheckOptions};
use vidvae::graph::Graph;
use vidvae::model::config::ModelConfig;
use vidvae::model::inflate::inflate_2d_to_3d;
use vidvae::model::params::{Bound, ParamStore};
use vidvae::model::vae::Vae;
use vidvae::regularization::{
    map_psi, reg_decoder_term, reg_encoder_term, reg_loss_decoder, reg_loss_encoder, FrozenImage, PsiKind, PsiSpec,
};
use vidvae::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Narrow f64 models with `ρ_s = 2` and `ρ_t = 2`.
fn micro() -> (ModelConfig, ModelConfig) {
    let video = ModelConfig {
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
    (video.to_image(), video)
}

fn models(seed: u64) -> (Vae, ParamStore<f64>, Vae, ParamStore<f64>) {
    let (ic, vc) = micro();
    let image = Vae::new(&ic).unwrap();
    let ip = image.init_params::<f64>(seed).unwrap();
    let video = Vae::new(&vc).unwrap();
    let vp = video.init_params::<f64>(seed + 1).unwrap();
    (image, ip, video, vp)
}

#[test]
fn decoder_loss_gradient_matches_finite_differences() {
    let (image, ip, video, vp) = models(1);
    let x = Tensor::<f64>::rand_uniform(&[1, 5, 4, 4, 3], -1.0, 1.0, &mut rng(2));
    let psi = PsiSpec::new(PsiKind::Slice, 2, 0);
    let target = map_psi(&psi, &x).unwrap();
    let names: Vec<String> = ["encoder.conv_out.weight", "encoder.level0.res0.conv_a.weight", "encoder.conv_in.bias"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| vp.get(n).unwrap().clone()).collect();
    let opts = GradCheckOptions {
        max_probes: Some(12),
        ..Default::default()
    };
    let report = grad_check_with(
        |g, vars| {
            let mut bound = vp.bind(g, false);
            for (n, &v) in names.iter().zip(vars) {
                bound.insert(n, v);
            }
            let frozen_ip = ip.bind(g, false);
            let xv = g.input(x.clone());
            let post = video.encode_graph(g, &bound, xv)?;
            let frozen = FrozenImage {
                vae: &image,
                params: &frozen_ip,
            };
            reg_decoder_term(g, &frozen, post.mean, &target)
        },
        &inputs,
        1e-4,
        &opts,
    )
    .unwrap();
    assert!(report.passed, "relative error {:.3e}", report.max_rel_error);
}

#[test]
fn encoder_loss_gradient_matches_finite_differences() {
    let (image, ip, video, vp) = models(3);
    let x = Tensor::<f64>::rand_uniform(&[1, 5, 4, 4, 3], -1.0, 1.0, &mut rng(4));
    let psi = PsiSpec::new(PsiKind::Average, 2, 0);
    let mapped = map_psi(&psi, &x).unwrap();
    let names: Vec<String> = ["decoder.conv_out.weight", "decoder.conv_in.weight", "decoder.norm_out.gain"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| vp.get(n).unwrap().clone()).collect();
    let opts = GradCheckOptions {
        max_probes: Some(12),
        ..Default::default()
    };
    let report = grad_check_with(
        |g, vars| {
            let mut bound: Bound = vp.bind(g, false);
            for (n, &v) in names.iter().zip(vars) {
                bound.insert(n, v);
            }
            let frozen_ip = ip.bind(g, false);
            let xv = g.input(x.clone());
            let frozen = FrozenImage {
                vae: &image,
                params: &frozen_ip,
            };
            reg_encoder_term(g, &frozen, &video, &bound, xv, &mapped)
        },
        &inputs,
        1e-4,
        &opts,
    )
    .unwrap();
    assert!(report.passed, "relative error {:.3e}", report.max_rel_error);
}

#[test]
fn image_parameters_get_no_gradient_from_alignment() {
    let (image, ip, video, vp) = models(5);
    let x = Tensor::<f64>::rand_uniform(&[1, 3, 4, 4, 3], -1.0, 1.0, &mut rng(6));
    let mapped = map_psi(&PsiSpec::new(PsiKind::Slice, 2, 0), &x).unwrap();
    let mut g = Graph::new();
    let bi = ip.bind(&mut g, false);
    let bv = vp.bind(&mut g, true);
    let xv = g.input(x.clone());
    let frozen = FrozenImage { vae: &image, params: &bi };
    let post = video.encode_graph(&mut g, &bv, xv).unwrap();
    let a = reg_decoder_term(&mut g, &frozen, post.mean, &mapped).unwrap();
    let b = reg_encoder_term(&mut g, &frozen, &video, &bv, xv, &mapped).unwrap();
    let total = g.add(a, b).unwrap();
    let grads = g.backward(total).unwrap();
    assert!(bi.iter().all(|(_, v)| grads.get(v).is_none()));
    assert!(bv.iter().any(|(_, v)| grads.get(v).is_some()));
}

#[test]
fn decoder_loss_matches_pipeline_oracle() {
    let (image, ip, video, vp) = models(7);
    let x = Tensor::<f64>::rand_uniform(&[1, 5, 4, 4, 3], -1.0, 1.0, &mut rng(8));
    let noise = Tensor::<f64>::randn(&[1, 3, 2, 2, 2], 1.0, &mut rng(9));
    for kind in PsiKind::ALL {
        let psi = PsiSpec::new(kind, 2, 10);
        let got = reg_loss_decoder(&image, &ip, &video, &vp, &x, &psi, Some(&noise)).unwrap();

        let post = video.encode(&vp, &x, Some(&noise)).unwrap();
        let target = map_psi(&psi, &x).unwrap();
        let z = if target.shape()[1] == 1 {
            post.sample.slice_time(0, 1).unwrap()
        } else {
            post.sample.clone()
        };
        let want = image.decode(&ip, &z).unwrap().mse(&target).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{}: {} vs {}", kind, got, want);
    }
}

#[test]
fn encoder_loss_matches_pipeline_oracle() {
    let (image, ip, video, vp) = models(11);
    let x = Tensor::<f64>::rand_uniform(&[1, 5, 4, 4, 3], -1.0, 1.0, &mut rng(12));
    for kind in PsiKind::ALL {
        let psi = PsiSpec::new(kind, 2, 13);
        let got = reg_loss_encoder(&image, &ip, &video, &vp, &x, &psi).unwrap();
        let z = image.encode(&ip, &map_psi(&psi, &x).unwrap(), None).unwrap().mean;
        let rec = video.decode(&vp, &z).unwrap();
        let target = x.slice_time(0, rec.shape()[1]).unwrap();
        let want = rec.mse(if kind == PsiKind::First { &target } else { &x }).unwrap();
        assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{}: {} vs {}", kind, got, want);
    }
    let short = PsiSpec::new(PsiKind::Slice, 4, 0);
    assert!(reg_loss_encoder(&image, &ip, &video, &vp, &x, &short).is_err());
}

#[test]
fn alignment_is_near_zero_right_after_inflation_on_stills() {
    let (ic, vc) = micro();
    let image = Vae::new(&ic).unwrap();
    let ip = image.init_params::<f64>(14).unwrap();
    let video = Vae::new(&vc).unwrap();
    let vp = inflate_2d_to_3d(&ip, &ic, &vc).unwrap();
    let x = Tensor::<f64>::rand_uniform(&[2, 1, 4, 4, 3], -1.0, 1.0, &mut rng(15));
    let psi = PsiSpec::new(PsiKind::First, 2, 0);
    let dec = reg_loss_decoder(&image, &ip, &video, &vp, &x, &psi, None).unwrap();
    let own = image.reconstruct(&ip, &x).unwrap().mse(&x).unwrap();
    assert!((dec - own).abs() < 1e-10, "{} vs {}", dec, own);
}

#[test]
fn reference_model_must_be_an_image_vae() {
    let (_, _, video, vp) = models(16);
    let x = Tensor::<f64>::zeros(&[1, 3, 4, 4, 3]);
    let psi = PsiSpec::new(PsiKind::Slice, 2, 0);
    assert!(reg_loss_decoder(&video, &vp, &video, &vp, &x, &psi, None).is_err());
}

fn kinds() -> impl Strategy<Value = PsiKind> {
    prop_oneof![
        Just(PsiKind::First),
        Just(PsiKind::Slice),
        Just(PsiKind::Average),
        Just(PsiKind::Random)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn psi_length_and_first_frame(
        kind in kinds(), rho in 1usize..6, n in 0usize..5, seed in any::<u64>(),
    ) {
        let frames = 1 + n * rho;
        let x = Tensor::<f32>::rand_uniform(&[2, frames, 3, 2, 3], -1.0, 1.0, &mut rng(seed));
        let spec = PsiSpec::new(kind, rho, seed);
        let y = map_psi(&spec, &x).unwrap();
        let expected = if kind == PsiKind::First { 1 } else { 1 + n };
        prop_assert_eq!(y.shape(), &[2, expected, 3, 2, 3][..]);
        prop_assert_eq!(spec.output_frames(frames).unwrap(), expected);
        for b in 0..2 {
            let per = 3 * 2 * 3;
            let src = &x.data()[b * frames * per..b * frames * per + per];
            let dst = &y.data()[b * expected * per..b * expected * per + per];
            prop_assert_eq!(src, dst);
        }
    }

    #[test]
    fn psi_average_of_constant_is_constant(rho in 1usize..6, n in 0usize..5, c in -1.0f64..1.0) {
        let frames = 1 + n * rho;
        let x = Tensor::<f64>::full(&[1, frames, 2, 2, 3], c);
        let y = map_psi(&PsiSpec::new(PsiKind::Average, rho, 0), &x).unwrap();
        prop_assert!(y.data().iter().all(|&v| (v - c).abs() <= 1e-15));
    }

    #[test]
    fn psi_random_stays_in_window(rho in 1usize..6, n in 0usize..6, seed in any::<u64>()) {
        let frames = 1 + n * rho;
        let idx = PsiSpec::new(PsiKind::Random, rho, seed).indices(frames).unwrap();
        prop_assert_eq!(idx.len(), 1 + n);
        prop_assert_eq!(idx[0], 0);
        for (j, &i) in idx.iter().enumerate().skip(1) {
            prop_assert!(i > (j - 1) * rho && i <= j * rho);
        }
        let again = PsiSpec::new(PsiKind::Random, rho, seed).indices(frames).unwrap();
        prop_assert_eq!(idx, again);
    }

    #[test]
    fn psi_slice_takes_window_ends(rho in 1usize..6, n in 0usize..6) {
        let idx = PsiSpec::new(PsiKind::Slice, rho, 0).indices(1 + n * rho).unwrap();
        prop_assert_eq!(idx, (0..=n).map(|j| j * rho).collect::<Vec<_>>());
    }

    #[test]
    fn psi_rejects_incongruent_lengths(kind in kinds(), rho in 2usize..6, n in 0usize..5, off in 1usize..5) {
        let frames = 1 + n * rho + (off % rho).max(1);
        prop_assume!((frames - 1) % rho != 0);
        let x = Tensor::<f32>::zeros(&[1, frames, 1, 1, 3]);
        prop_assert!(map_psi(&PsiSpec::new(kind, rho, 0), &x).is_err());
    }
}
