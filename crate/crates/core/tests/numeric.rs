use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vidvae::error::Error;
use vidvae::gradcheck::{grad_check_with, GradCheckOptions};
use vidvae::graph::{Graph, Var};
use vidvae::kernels::conv::{conv3d_forward, ConvGeometry, TemporalPad};
use vidvae::tensor::Tensor;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values pushed at least `gap` away from every point in `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], gap: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -2.0, 2.0, &mut rng(seed)).map(|mut v: f64| {
        for &k in kinks {
            if (v - k).abs() < gap {
                v = if v >= k { k + gap } else { k - gap };
            }
        }
        v
    })
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> vidvae::error::Result<Var>,
{
    let opts = GradCheckOptions {
        max_probes: Some(40),
        ..Default::default()
    };
    let r = grad_check_with(f, inputs, TOL, &opts).unwrap();
    assert!(r.passed, "{}: relative error {:.3e} over {} probes", name, r.max_rel_error, r.probes);
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> vidvae::error::Result<Var> {
    let w = Tensor::rand_uniform(g.shape(y), -1.0, 1.0, &mut rng(seed));
    let w = g.input(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn grad_conv3d_all_paddings_and_strides() {
    let cases = [
        (TemporalPad::ReflectFirstFrame, [1, 1, 1], [1, 1]),
        (TemporalPad::Zero, [2, 2, 1], [1, 0]),
        (TemporalPad::None, [1, 2, 2], [0, 1]),
    ];
    for (i, (temporal, stride, pad)) in cases.into_iter().enumerate() {
        let x = Tensor::rand_uniform(&[2, 5, 5, 4, 3], -1.0, 1.0, &mut rng(i as u64));
        let w = Tensor::rand_uniform(&[2, 3, 3, 3, 2], -0.5, 0.5, &mut rng(10 + i as u64));
        let b = Tensor::rand_uniform(&[2], -0.5, 0.5, &mut rng(20 + i as u64));
        let geom = ConvGeometry::new(stride, pad, temporal);
        check("conv3d", &[x, w, b], |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], geom)?;
            weighted_sum(g, y, 99)
        });
    }
}

#[test]
fn grad_group_norm() {
    let x = Tensor::rand_uniform(&[2, 3, 3, 3, 6], -1.0, 1.0, &mut rng(1));
    let gain = Tensor::rand_uniform(&[6], 0.5, 1.5, &mut rng(2));
    let shift = Tensor::rand_uniform(&[6], -0.5, 0.5, &mut rng(3));
    check("group_norm", &[x, gain, shift], |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 3, 1e-6)?;
        weighted_sum(g, y, 4)
    });
}

#[test]
fn grad_pointwise_ops() {
    let shape = [1, 2, 3, 3, 2];
    let smooth = Tensor::rand_uniform(&shape, -2.0, 2.0, &mut rng(5));
    check("silu", std::slice::from_ref(&smooth), |g, v| {
        let y = g.silu(v[0])?;
        weighted_sum(g, y, 6)
    });
    check("exp", std::slice::from_ref(&smooth), |g, v| {
        let y = g.exp(v[0])?;
        weighted_sum(g, y, 7)
    });
    check("square", std::slice::from_ref(&smooth), |g, v| {
        let y = g.square(v[0])?;
        weighted_sum(g, y, 8)
    });
    check("affine", &[smooth], |g, v| {
        let y = g.affine(v[0], -1.7, 0.3)?;
        weighted_sum(g, y, 9)
    });
    let kinked = away_from(&shape, &[0.0], 0.05, 10);
    check("relu", std::slice::from_ref(&kinked), |g, v| {
        let y = g.relu(v[0])?;
        weighted_sum(g, y, 11)
    });
    check("leaky_relu", std::slice::from_ref(&kinked), |g, v| {
        let y = g.leaky_relu(v[0], 0.2)?;
        weighted_sum(g, y, 12)
    });
    check("abs", &[kinked], |g, v| {
        let y = g.abs(v[0])?;
        weighted_sum(g, y, 13)
    });
    let clamped = away_from(&shape, &[-0.5, 0.75], 0.05, 14);
    check("clamp", &[clamped], |g, v| {
        let y = g.clamp(v[0], -0.5, 0.75)?;
        weighted_sum(g, y, 15)
    });
}

#[test]
fn grad_binary_ops() {
    let a = Tensor::rand_uniform(&[1, 2, 2, 3, 2], -1.0, 1.0, &mut rng(16));
    let b = Tensor::rand_uniform(&[1, 2, 2, 3, 2], -1.0, 1.0, &mut rng(17));
    check("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 18)
    });
    check("sub", &[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted_sum(g, y, 19)
    });
    check("mul", &[a, b], |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 20)
    });
}

#[test]
fn grad_layout_ops() {
    let x = Tensor::rand_uniform(&[2, 3, 2, 2, 8], -1.0, 1.0, &mut rng(21));
    check("slice_channels", std::slice::from_ref(&x), |g, v| {
        let y = g.slice_channels(v[0], 2, 4)?;
        weighted_sum(g, y, 22)
    });
    check("slice_time", std::slice::from_ref(&x), |g, v| {
        let y = g.slice_time(v[0], 1, 2)?;
        weighted_sum(g, y, 23)
    });
    check("channel_to_time", std::slice::from_ref(&x), |g, v| {
        let y = g.channel_to_time(v[0], 4)?;
        weighted_sum(g, y, 24)
    });
    check("upsample2x", std::slice::from_ref(&x), |g, v| {
        let y = g.upsample2x(v[0])?;
        weighted_sum(g, y, 25)
    });
    let y = Tensor::rand_uniform(&[2, 2, 2, 2, 8], -1.0, 1.0, &mut rng(26));
    check("concat_time", &[x, y], |g, v| {
        let c = g.concat_time(&[v[0], v[1], v[0]])?;
        weighted_sum(g, c, 27)
    });
}

#[test]
fn grad_reductions_and_losses() {
    let a = Tensor::rand_uniform(&[1, 2, 3, 3, 2], -1.0, 1.0, &mut rng(28));
    let b = Tensor::rand_uniform(&[1, 2, 3, 3, 2], -1.0, 1.0, &mut rng(29));
    check("sum", std::slice::from_ref(&a), |g, v| {
        let s = g.square(v[0])?;
        g.sum(s)
    });
    check("mean", std::slice::from_ref(&a), |g, v| {
        let s = g.exp(v[0])?;
        g.mean(s)
    });
    check("mse_loss", &[a.clone(), b.clone()], |g, v| g.mse_loss(v[0], v[1]));
    let delta = away_from(a.shape(), &[0.0], 0.05, 30);
    let a_far = Tensor::from_vec(a.shape(), b.data().iter().zip(delta.data()).map(|(x, d)| x + d).collect()).unwrap();
    check("l1_loss", &[a_far, b], |g, v| g.l1_loss(v[0], v[1]));
}

#[test]
fn backward_requires_scalar_loss_and_rejects_non_finite() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[2], 1000.0), true);
    assert!(matches!(g.exp(x), Err(Error::NonFinite { .. })));
    let y = g.square(x).unwrap();
    assert!(g.backward(y).is_err());
}

#[test]
fn frozen_inputs_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::full(&[3], 2.0), true);
    let b = g.leaf(Tensor::full(&[3], 5.0), false);
    let c = g.mul(a, b).unwrap();
    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[5.0, 5.0, 5.0]);
    assert!(grads.get(b).is_none());
}

/// Direct six-fold sum for the causal 3D convolution.
fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, geom: &ConvGeometry) -> Tensor<f64> {
    let [b, t, h, wd, ci] = x.dims5().unwrap();
    let s = w.shape();
    let (co, kt, kh, kw) = (s[0], s[2], s[3], s[4]);
    let pad_t = if geom.temporal == TemporalPad::None { 0 } else { kt - 1 };
    let [st, sh, sw] = geom.stride;
    let [ph, pw] = geom.pad_hw;
    let to = (t + pad_t - kt) / st + 1;
    let ho = (h + 2 * ph - kh) / sh + 1;
    let wo = (wd + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; b * to * ho * wo * co];
    for bi in 0..b {
        for ot in 0..to {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..co {
                        let mut acc = bias.data()[o];
                        for dt in 0..kt {
                            let p = (ot * st + dt) as isize - pad_t as isize;
                            let src_t = match (p < 0, geom.temporal) {
                                (false, _) => Some(p as usize),
                                (true, TemporalPad::ReflectFirstFrame) => Some(0),
                                _ => None,
                            };
                            let Some(tt) = src_t else { continue };
                            for dy in 0..kh {
                                let yy = (oy * sh + dy) as isize - ph as isize;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let xx = (ox * sw + dx) as isize - pw as isize;
                                    if xx < 0 || xx >= wd as isize {
                                        continue;
                                    }
                                    for c in 0..ci {
                                        let xi = (((bi * t + tt) * h + yy as usize) * wd + xx as usize) * ci + c;
                                        let wi = (((o * ci + c) * kt + dt) * kh + dy) * kw + dx;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        out[(((bi * to + ot) * ho + oy) * wo + ox) * co + o] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, to, ho, wo, co], out).unwrap()
}

fn pad_strategy() -> impl Strategy<Value = TemporalPad> {
    prop_oneof![
        Just(TemporalPad::ReflectFirstFrame),
        Just(TemporalPad::Zero),
        Just(TemporalPad::None)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv3d_matches_direct_sum(
        t in 1usize..6, h in 3usize..7, w in 3usize..7,
        ci in 1usize..4, co in 1usize..4,
        kt in 1usize..4, k in prop_oneof![Just(1usize), Just(3usize)],
        st in 1usize..3, ss in 1usize..3,
        temporal in pad_strategy(), seed in any::<u64>(),
    ) {
        let pad_t = if temporal == TemporalPad::None { 0 } else { kt - 1 };
        prop_assume!(t + pad_t >= kt);
        let x = Tensor::<f64>::rand_uniform(&[2, t, h, w, ci], -1.0, 1.0, &mut rng(seed));
        let wt = Tensor::<f64>::rand_uniform(&[co, ci, kt, k, k], -1.0, 1.0, &mut rng(seed ^ 1));
        let b = Tensor::<f64>::rand_uniform(&[co], -1.0, 1.0, &mut rng(seed ^ 2));
        let geom = ConvGeometry::new([st, ss, ss], [k / 2, k / 2], temporal);
        let got = conv3d_forward(&x, &wt, &b, &geom).unwrap();
        let want = conv_direct(&x, &wt, &b, &geom);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn conv3d_output_frame_depends_only_on_past(
        t in 2usize..7, kt in 1usize..4, cut in 1usize..6, seed in any::<u64>(),
    ) {
        let cut = cut.min(t - 1);
        let x = Tensor::<f64>::rand_uniform(&[1, t, 4, 4, 2], -1.0, 1.0, &mut rng(seed));
        let mut y = x.clone();
        for v in &mut y.data_mut()[cut * 32..] {
            *v += 1.0;
        }
        let wt = Tensor::<f64>::rand_uniform(&[3, 2, kt, 3, 3], -1.0, 1.0, &mut rng(seed ^ 3));
        let b = Tensor::<f64>::zeros(&[3]);
        let geom = ConvGeometry::same(3);
        let a = conv3d_forward(&x, &wt, &b, &geom).unwrap();
        let c = conv3d_forward(&y, &wt, &b, &geom).unwrap();
        prop_assert_eq!(a.slice_time(0, cut).unwrap(), c.slice_time(0, cut).unwrap());
    }

    #[test]
    fn group_norm_standardizes_each_frame_group(
        t in 1usize..4, groups in 1usize..4, per in 1usize..4, seed in any::<u64>(),
    ) {
        let c = groups * per;
        let x = Tensor::<f64>::rand_uniform(&[2, t, 3, 3, c], -3.0, 3.0, &mut rng(seed));
        let mut g = Graph::new();
        let xv = g.input(x);
        let gain = g.input(Tensor::full(&[c], 1.0));
        let shift = g.input(Tensor::zeros(&[c]));
        let y = g.group_norm(xv, gain, shift, groups, 1e-6).unwrap();
        let y = g.value(y);
        for frame in y.data().chunks(9 * c) {
            for gi in 0..groups {
                let vals: Vec<f64> = frame
                    .chunks(c)
                    .flat_map(|px| px[gi * per..(gi + 1) * per].to_vec())
                    .collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!(var <= 1.0 + 1e-9 && var > 0.99);
            }
        }
    }

    #[test]
    fn channel_to_time_takes_last_group_for_frame_zero(
        t in 1usize..4, factor in prop_oneof![Just(2usize), Just(4usize)], c in 1usize..3, seed in any::<u64>(),
    ) {
        let x = Tensor::<f64>::rand_uniform(&[1, t, 2, 2, c * factor], -1.0, 1.0, &mut rng(seed));
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = g.channel_to_time(xv, factor).unwrap();
        let y = g.value(y).clone();
        prop_assert_eq!(y.shape(), &[1, 1 + (t - 1) * factor, 2, 2, c][..]);
        for px in 0..4 {
            let src = &x.data()[px * c * factor..(px + 1) * c * factor];
            let dst = &y.data()[px * c..(px + 1) * c];
            prop_assert_eq!(dst, &src[(factor - 1) * c..]);
        }
    }
}
