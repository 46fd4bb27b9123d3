use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vidvae::error::Error;
use vidvae::model::config::{ConvMix, ModelConfig};
use vidvae::model::discriminator::Discriminator;
use vidvae::model::inflate::inflate_2d_to_3d;
use vidvae::model::params::{count_params, ParamStore};
use vidvae::model::vae::Vae;
use vidvae::objective::losses::LossWeights;
use vidvae::objective::optim::{AdamWConfig, LrSchedule};
use vidvae::objective::trainer::Trainer;
use vidvae::regularization::PsiKind;
use vidvae::selftest::tiny_video_config;
use vidvae::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

#[test]
fn shape_algebra_at_desk_config() {
    let vae = Vae::new(&ModelConfig::desk_video()).unwrap();
    assert_eq!(vae.latent_shape(&[1, 17, 64, 64, 3]).unwrap(), [1, 5, 8, 8, 4]);
    assert_eq!(vae.video_shape(&[1, 5, 8, 8, 4]).unwrap(), [1, 17, 64, 64, 3]);
    assert_eq!(vae.latent_shape(&[1, 9, 32, 32, 3]).unwrap(), [1, 3, 4, 4, 4]);

    let p = vae.init_params::<f32>(0).unwrap();
    let x = uniform(&[1, 9, 32, 32, 3], 1);
    let post = vae.encode(&p, &x, None).unwrap();
    assert_eq!(post.mean.shape(), &[1, 3, 4, 4, 4]);
    assert_eq!(post.log_variance.shape(), &[1, 3, 4, 4, 4]);
    assert_eq!(vae.decode(&p, &post.mean).unwrap().shape(), &[1, 9, 32, 32, 3]);

    let image = Vae::new(&ModelConfig::desk_image()).unwrap();
    assert_eq!(image.latent_shape(&[1, 1, 64, 64, 3]).unwrap(), [1, 1, 8, 8, 4]);
}

#[test]
fn rejects_incongruent_extents() {
    let vae = Vae::new(&ModelConfig::desk_video()).unwrap();
    assert!(matches!(vae.latent_shape(&[1, 8, 32, 32, 3]), Err(Error::Shape(_))));
    assert!(matches!(vae.latent_shape(&[1, 9, 30, 32, 3]), Err(Error::Shape(_))));
    assert!(vae.latent_shape(&[1, 9, 32, 32, 4]).is_err());
    let p = vae.init_params::<f32>(0).unwrap();
    assert!(vae.encode(&p, &Tensor::zeros(&[1, 6, 16, 16, 3]), None).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = ModelConfig::desk_video();
    let bad = [
        ModelConfig {
            norm_groups: 5,
            ..base.clone()
        },
        ModelConfig {
            temporal_down_levels: 4,
            ..base.clone()
        },
        ModelConfig {
            conv_mix: ConvMix::All2d,
            ..base.clone()
        },
        ModelConfig {
            mid_attention: true,
            ..base.clone()
        },
    ];
    for c in bad {
        assert!(matches!(Vae::new(&c), Err(Error::Config(_))), "{:?}", c);
    }
}

#[test]
fn hybrid_resblocks_keep_second_conv_per_frame() {
    let vae = Vae::new(&ModelConfig::desk_video()).unwrap();
    for s in vae.specs() {
        if s.shape.len() != 5 {
            continue;
        }
        let kt = s.shape[2];
        if s.name.contains(".conv_b.") || s.name.contains("shortcut") || s.name.contains("quant_conv") {
            assert_eq!(kt, 1, "{}", s.name);
        } else {
            assert_eq!(kt, 3, "{}", s.name);
        }
    }
}

#[test]
fn hybrid_parameter_ratio_in_band() {
    let desk = ModelConfig::desk_video();
    let hybrid = count_params(&Vae::new(&desk).unwrap().init_params::<f32>(0).unwrap());
    let all3d_cfg = desk.to_video(ConvMix::All3d, 2, 3);
    let all3d = count_params(&Vae::new(&all3d_cfg).unwrap().init_params::<f32>(0).unwrap());
    let ratio = hybrid as f64 / all3d as f64;
    assert!((0.60..=0.80).contains(&ratio), "hybrid {} / all-3d {} = {}", hybrid, all3d, ratio);
}

#[test]
fn discriminator_layout_and_zero_logits_at_init() {
    let d = Discriminator::new(&ModelConfig::desk_video()).unwrap();
    let p = d.init_params::<f32>(3).unwrap();
    assert!(p.names().all(|n| n.starts_with("disc.")));
    assert_eq!(d.layers.len(), 4);
    let logits = d.discriminate(&p, &uniform(&[1, 5, 16, 16, 3], 4)).unwrap();
    assert_eq!(logits.shape(), &[1, 5, 4, 4, 1]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

fn inflation_pair(video_cfg: &ModelConfig, seed: u64) -> (Vae, ParamStore<f32>, Vae, ParamStore<f32>) {
    let image_cfg = video_cfg.to_image();
    let image = Vae::new(&image_cfg).unwrap();
    let ip = image.init_params::<f32>(seed).unwrap();
    let vp = inflate_2d_to_3d(&ip, &image_cfg, video_cfg).unwrap();
    (image, ip, Vae::new(video_cfg).unwrap(), vp)
}

#[test]
fn inflation_identity_for_every_conv_mix() {
    let base = tiny_video_config();
    for mix in [ConvMix::Hybrid2d3d, ConvMix::All3d] {
        for kt in [2, 3] {
            let cfg = base.to_video(mix, 2, kt);
            let (image, ip, video, vp) = inflation_pair(&cfg, 5);
            let x = uniform(&[3, 1, 16, 16, 3], 6);
            let a = image.encode(&ip, &x, None).unwrap();
            let b = video.encode(&vp, &x, None).unwrap();
            assert!(a.mean.max_abs_diff(&b.mean).unwrap() <= 1e-5);
            assert!(a.log_variance.max_abs_diff(&b.log_variance).unwrap() <= 1e-5);
            let ra = image.decode(&ip, &a.mean).unwrap();
            let rb = video.decode(&vp, &b.mean).unwrap();
            assert!(ra.max_abs_diff(&rb).unwrap() <= 1e-4, "{:?} kt={}", mix, kt);
        }
    }
}

#[test]
fn inflation_embeds_kernel_at_last_tap_and_zeroes_the_rest() {
    let cfg = tiny_video_config();
    let (_, ip, _, vp) = inflation_pair(&cfg, 7);
    let w2 = ip.get("encoder.conv_in.weight").unwrap();
    let w3 = vp.get("encoder.conv_in.weight").unwrap();
    let s = w3.shape().to_vec();
    let (kt, kk) = (s[2], s[3] * s[4]);
    for oc in 0..s[0] * s[1] {
        for t in 0..kt {
            let tap = &w3.data()[(oc * kt + t) * kk..(oc * kt + t + 1) * kk];
            if t + 1 == kt {
                assert_eq!(tap, &w2.data()[oc * kk..(oc + 1) * kk]);
            } else {
                assert!(tap.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn inflation_covers_discriminator_weights() {
    let cfg = tiny_video_config();
    let image_cfg = cfg.to_image();
    let mut ip = Vae::new(&image_cfg).unwrap().init_params::<f32>(8).unwrap();
    ip.merge(Discriminator::new(&image_cfg).unwrap().init_params(9).unwrap()).unwrap();
    let vp = inflate_2d_to_3d(&ip, &image_cfg, &cfg).unwrap();
    assert_eq!(vp.get("disc.layer0.weight").unwrap().shape()[2], cfg.temporal_kernel);
}

#[test]
fn inflation_reports_unmatched_parameters() {
    let cfg = tiny_video_config();
    let image_cfg = cfg.to_image();
    let mut ip = Vae::new(&image_cfg).unwrap().init_params::<f32>(10).unwrap();
    ip.split_off_prefix("decoder.conv_out");
    match inflate_2d_to_3d(&ip, &image_cfg, &cfg) {
        Err(Error::Inflation { unmatched }) => {
            assert!(unmatched.iter().any(|n| n.starts_with("decoder.conv_out")), "{:?}", unmatched)
        }
        other => panic!("expected an inflation error, got {:?}", other.map(|p| p.len())),
    }
    assert!(inflate_2d_to_3d(&ip, &cfg, &cfg).is_err());
}

#[test]
fn encoder_latent_depends_only_on_its_frames() {
    let cfg = tiny_video_config();
    let vae = Vae::new(&cfg).unwrap();
    let p = vae.init_params::<f32>(11).unwrap();
    let x = uniform(&[1, 13, 16, 16, 3], 12);
    let base = vae.encode(&p, &x, None).unwrap().mean;
    for j in 0..3 {
        let mut y = x.clone();
        let cut = 1 + 4 * j;
        for v in &mut y.data_mut()[cut * 16 * 16 * 3..] {
            *v = 0.5 - *v;
        }
        let z = vae.encode(&p, &y, None).unwrap().mean;
        assert_eq!(base.slice_time(0, j + 1).unwrap(), z.slice_time(0, j + 1).unwrap(), "latent {}", j);
        assert_ne!(base.slice_time(j + 1, 1).unwrap(), z.slice_time(j + 1, 1).unwrap());
    }
}

#[test]
fn decoder_frames_depend_only_on_past_latents() {
    let cfg = tiny_video_config();
    let vae = Vae::new(&cfg).unwrap();
    let p = vae.init_params::<f32>(13).unwrap();
    let z = uniform(&[1, 4, 2, 2, 4], 14);
    let base = vae.decode(&p, &z).unwrap();
    for j in 1..4 {
        let mut w = z.clone();
        for v in &mut w.data_mut()[j * 16..] {
            *v += 1.0;
        }
        let y = vae.decode(&p, &w).unwrap();
        let kept = 1 + 4 * (j - 1);
        assert_eq!(base.slice_time(0, kept).unwrap(), y.slice_time(0, kept).unwrap(), "latent {}", j);
    }
}

#[test]
fn frozen_models_are_untouched_by_training() {
    let cfg = tiny_video_config();
    let (image, ip, video, vp) = inflation_pair(&cfg, 15);
    let dp = Discriminator::new(&cfg).unwrap().init_params::<f32>(16).unwrap();
    let weights = LossWeights {
        lambda1: 1.0,
        lambda2: 1.0,
        adv_start: 1,
        ..Default::default()
    };
    let mut trainer = Trainer::new(
        video,
        vp.clone(),
        dp.clone(),
        Some((image, ip.clone())),
        weights,
        PsiKind::Random,
        AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        },
        LrSchedule::Constant,
        17,
    )
    .unwrap();
    let x = uniform(&[1, 5, 16, 16, 3], 18);
    trainer.step(&x).unwrap();
    assert!(trainer.params.iter().zip(vp.iter()).any(|(a, b)| a.1.value != b.1.value));
    assert!(trainer.disc_params.iter().zip(dp.iter()).all(|(a, b)| a.1.value == b.1.value));
    let image_same = |t: &Trainer| t.image.as_ref().unwrap().1.iter().zip(ip.iter()).all(|(a, b)| a.1.value == b.1.value);
    assert!(image_same(&trainer));
    let m = trainer.step(&x).unwrap();
    assert!(m.disc_loss.is_some());
    assert!(trainer.disc_params.iter().zip(dp.iter()).any(|(a, b)| a.1.value != b.1.value));
    assert!(image_same(&trainer));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn latent_and_video_shapes_invert(
        n in 0usize..6, hs in 1usize..5, ws in 1usize..5, batch in 1usize..3,
        levels in 0usize..3,
    ) {
        let cfg = ModelConfig::desk_video().to_video(ConvMix::Hybrid2d3d, levels, 3);
        let vae = Vae::new(&cfg).unwrap();
        let rho = cfg.temporal_factor();
        let video = [batch, 1 + n * rho, hs * 8, ws * 8, 3];
        let latent = vae.latent_shape(&video).unwrap();
        prop_assert_eq!(latent, [batch, 1 + n, hs, ws, 4]);
        prop_assert_eq!(vae.video_shape(&latent).unwrap(), video);
    }
}
