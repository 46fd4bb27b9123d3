//! Group normalization with statistics per `(batch, time, group)`.
//!
//! Frames never share statistics, so a single frame normalizes identically
//! whether it is processed alone or as part of a longer clip.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-slice statistics saved by the forward pass, `B·T·groups` entries each.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

fn check<T: Real>(
    input: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<[usize; 5]> {
    let dims = input.dims5()?;
    let c = dims[4];
    if groups == 0 || c % groups != 0 {
        return Err(Error::contract(
            "group_norm",
            format!("{} groups do not divide {} channels", groups, c),
        ));
    }
    if gain.shape() != [c] || shift.shape() != [c] {
        return Err(Error::contract(
            "group_norm",
            format!("gain/shift must have shape [{}]", c),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::contract("group_norm", "eps must be positive"));
    }
    Ok(dims)
}

pub fn group_norm_forward<T: Real>(
    input: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, GroupStats)> {
    let [b, t, h, w, c] = check(input, groups, gain, shift, eps)?;
    let cg = c / groups;
    let hw = h * w;
    let n = (hw * cg) as f64;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut stats = GroupStats {
        mean: Vec::with_capacity(b * t * groups),
        rstd: Vec::with_capacity(b * t * groups),
    };
    let gain = gain.data();
    let shift = shift.data();
    for bt in 0..b * t {
        let frame = &x[bt * hw * c..(bt + 1) * hw * c];
        let dst = &mut out[bt * hw * c..(bt + 1) * hw * c];
        for g in 0..groups {
            let mut sum = 0.0;
            for p in 0..hw {
                for v in &frame[p * c + g * cg..p * c + (g + 1) * cg] {
                    sum += v.as_f64();
                }
            }
            let mean = sum / n;
            let mut var = 0.0;
            for p in 0..hw {
                for v in &frame[p * c + g * cg..p * c + (g + 1) * cg] {
                    let d = v.as_f64() - mean;
                    var += d * d;
                }
            }
            let rstd = 1.0 / (var / n + eps).sqrt();
            for p in 0..hw {
                for ci in g * cg..(g + 1) * cg {
                    let xhat = (frame[p * c + ci].as_f64() - mean) * rstd;
                    dst[p * c + ci] = T::of_f64(xhat * gain[ci].as_f64() + shift[ci].as_f64());
                }
            }
            stats.mean.push(mean);
            stats.rstd.push(rstd);
        }
    }
    Ok((Tensor::from_vec(input.shape(), out)?, stats))
}

pub struct GroupNormGrads<T> {
    pub input: Tensor<T>,
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

pub fn group_norm_backward<T: Real>(
    input: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    stats: &GroupStats,
    grad_out: &Tensor<T>,
) -> Result<GroupNormGrads<T>> {
    let [b, t, h, w, c] = input.dims5()?;
    if grad_out.shape() != input.shape() {
        return Err(Error::contract("group_norm_backward", "gradient shape mismatch"));
    }
    let cg = c / groups;
    let hw = h * w;
    let n = (hw * cg) as f64;
    let x = input.data();
    let dy = grad_out.data();
    let gv: Vec<f64> = gain.data().iter().map(|v| v.as_f64()).collect();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![0.0f64; c];
    let mut dshift = vec![0.0f64; c];
    for bt in 0..b * t {
        let base = bt * hw * c;
        for g in 0..groups {
            let s = bt * groups + g;
            let (mean, rstd) = (stats.mean[s], stats.rstd[s]);
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for p in 0..hw {
                for ci in g * cg..(g + 1) * cg {
                    let i = base + p * c + ci;
                    let xhat = (x[i].as_f64() - mean) * rstd;
                    let d = dy[i].as_f64();
                    dgain[ci] += d * xhat;
                    dshift[ci] += d;
                    let dxhat = d * gv[ci];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            for p in 0..hw {
                for ci in g * cg..(g + 1) * cg {
                    let i = base + p * c + ci;
                    let xhat = (x[i].as_f64() - mean) * rstd;
                    let dxhat = dy[i].as_f64() * gv[ci];
                    dx[i] = T::of_f64(rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
                }
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_vec(&[c], v.into_iter().map(T::of_f64).collect());
    Ok(GroupNormGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        gain: to_t(dgain)?,
        shift: to_t(dshift)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
    }

    #[test]
    fn constant_slices_normalize_to_zero() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3, 4], 5.0);
        let (g, s) = unit(4);
        let (y, _) = group_norm_forward(&x, 2, &g, &s, 1e-6).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn already_normalized_values_pass_through() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let (g, s) = unit(2);
        let (y, _) = group_norm_forward(&x, 1, &g, &s, 1e-12).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_direct_statistics_per_frame_and_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::randn(&[1, 2, 2, 2, 4], 1.0, &mut rng);
        let (g, s) = unit(4);
        let eps = 1e-5;
        let (y, _) = group_norm_forward(&x, 2, &g, &s, eps).unwrap();
        for t in 0..2 {
            for grp in 0..2 {
                let mut vals = vec![];
                for i in 0..2 {
                    for j in 0..2 {
                        for c in 2 * grp..2 * grp + 2 {
                            vals.push(((i, j, c), x[[0, t, i, j, c]]));
                        }
                    }
                }
                let mean = vals.iter().map(|v| v.1).sum::<f64>() / 8.0;
                let var = vals.iter().map(|v| (v.1 - mean).powi(2)).sum::<f64>() / 8.0;
                for ((i, j, c), v) in vals {
                    let want = (v - mean) / (var + eps).sqrt();
                    assert!((y[[0, t, i, j, c]] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn output_statistics_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(&[2, 3, 4, 4, 8], 3.0, &mut rng).map(|v| v + 1.5);
        let (g, s) = (Tensor::full(&[8], 1.0), Tensor::zeros(&[8]));
        let (y, _) = group_norm_forward(&x, 4, &g, &s, 1e-6).unwrap();
        for bt in 0..6 {
            for grp in 0..4 {
                let vals: Vec<f64> = (0..16)
                    .flat_map(|p| (2 * grp..2 * grp + 2).map(move |c| (p, c)))
                    .map(|(p, c)| y.data()[bt * 128 + p * 8 + c] as f64)
                    .collect();
                let mean = vals.iter().sum::<f64>() / 32.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
                assert!(mean.abs() <= 1e-5);
                assert!((var - 1.0).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn rejects_indivisible_groups() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2, 6]);
        let (g, s) = (Tensor::full(&[6], 1.0), Tensor::zeros(&[6]));
        assert!(matches!(
            group_norm_forward(&x, 4, &g, &s, 1e-6),
            Err(Error::Contract { .. })
        ));
    }
}
