//! KL, hinge adversarial and combined objective terms.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::discriminator::Discriminator;
use crate::model::params::{Bound, ParamStore};
use crate::model::vae::{reparameterize, LatentPosterior, Vae};
use crate::regularization::{map_psi, reg_decoder_term, reg_encoder_term, FrozenImage, PsiSpec};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Decoder-side alignment weight.
    pub lambda1: f64,
    /// Encoder-side alignment weight.
    pub lambda2: f64,
    pub kl_weight: f64,
    pub adv_weight: f64,
    /// First step at which the adversarial term and discriminator updates are active.
    pub adv_start: usize,
    /// Scales the adversarial term by `‖∇rec‖ / ‖∇gen‖` at the reconstruction.
    pub adaptive_adv: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            kl_weight: 1e-6,
            adv_weight: 0.1,
            adv_start: 200,
            adaptive_adv: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("kl_weight", self.kl_weight),
            ("adv_weight", self.adv_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{} must be finite and non-negative, got {}", name, v)));
            }
        }
        Ok(())
    }

    pub fn adv_active(&self, step: usize) -> bool {
        self.adv_weight > 0.0 && step >= self.adv_start
    }

    pub fn needs_image(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0
    }
}

/// Mean over latent positions of `-½(1 + logvar - μ² - exp(logvar))`.
pub fn kl_loss<T: Real>(post: &LatentPosterior<T>) -> f64 {
    let n = post.mean.numel().max(1) as f64;
    post.mean
        .data()
        .iter()
        .zip(post.log_variance.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            -0.5 * (1.0 + lv - m * m - lv.exp())
        })
        .sum::<f64>()
        / n
}

pub fn kl_term<T: Real>(g: &mut Graph<T>, mean: Var, log_variance: Var) -> Result<Var> {
    let m2 = g.square(mean)?;
    let ev = g.exp(log_variance)?;
    let a = g.sub(log_variance, m2)?;
    let a = g.sub(a, ev)?;
    let per = g.affine(a, -0.5, -0.5)?;
    g.mean(per)
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`
pub fn hinge_disc_term<T: Real>(g: &mut Graph<T>, logits_real: Var, logits_fake: Var) -> Result<Var> {
    let r = g.affine(logits_real, -1.0, 1.0)?;
    let r = g.relu(r)?;
    let r = g.mean(r)?;
    let f = g.affine(logits_fake, 1.0, 1.0)?;
    let f = g.relu(f)?;
    let f = g.mean(f)?;
    g.add(r, f)
}

/// `-mean(fake)`
pub fn hinge_gen_term<T: Real>(g: &mut Graph<T>, logits_fake: Var) -> Result<Var> {
    let m = g.mean(logits_fake)?;
    g.affine(m, -1.0, 0.0)
}

/// `(gen_loss, disc_loss)` of the hinge game for a real and a reconstructed video.
pub fn adversarial_losses<T: Real>(
    disc: &Discriminator,
    disc_params: &ParamStore<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<(f64, f64)> {
    if real.shape() != fake.shape() {
        return Err(Error::contract(
            "adversarial_losses",
            format!("real {:?} and fake {:?} differ", real.shape(), fake.shape()),
        ));
    }
    let mut g = Graph::new();
    let p = disc_params.bind(&mut g, false);
    let xr = g.input(real.clone());
    let xf = g.input(fake.clone());
    let lr = disc.forward(&mut g, &p, xr)?;
    let lf = disc.forward(&mut g, &p, xf)?;
    let gen = hinge_gen_term(&mut g, lf)?;
    let dl = hinge_disc_term(&mut g, lr, lf)?;
    Ok((g.value(gen).item().as_f64(), g.value(dl).item().as_f64()))
}

/// Models bound on one graph for evaluating the objective.
pub struct LossInputs<'a> {
    pub video: &'a Vae,
    pub video_params: &'a Bound,
    pub disc: &'a Discriminator,
    pub disc_params: &'a Bound,
    pub image: Option<FrozenImage<'a>>,
}

/// Graph handles of the objective.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub reconstruction: Var,
    pub rec: Var,
    pub kl: Var,
    pub gen: Option<Var>,
    pub reg_dec: Option<Var>,
    pub reg_enc: Option<Var>,
    /// Multiplier on `adv_weight`, held constant for the backward pass.
    pub adv_factor: f64,
}

/// Unweighted term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub kl: f64,
    pub gen: f64,
    pub reg_dec: f64,
    pub reg_enc: f64,
    pub adv_factor: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read<T: Real>(g: &Graph<T>, l: &LossGraph) -> Self {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
        LossBreakdown {
            rec: val(Some(l.rec)),
            kl: val(Some(l.kl)),
            gen: val(l.gen),
            reg_dec: val(l.reg_dec),
            reg_enc: val(l.reg_enc),
            adv_factor: l.adv_factor,
            total: val(Some(l.total)),
        }
    }

    /// `rec + kl_weight·kl + adv_weight·adv_factor·gen·[active] + λ1·reg_dec + λ2·reg_enc`
    pub fn weighted_sum(&self, w: &LossWeights, step: usize) -> f64 {
        let adv = if w.adv_active(step) { w.adv_weight * self.adv_factor * self.gen } else { 0.0 };
        self.rec + w.kl_weight * self.kl + adv + w.lambda1 * self.reg_dec + w.lambda2 * self.reg_enc
    }
}

/// Names the objective term in numeric errors.
fn in_term<V>(term: &str, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{} ({})", term, op),
        },
        other => other,
    })
}

/// `‖∇rec‖ / (‖∇gen‖ + 1e-4)` with both gradients taken at a detached copy
/// of the reconstruction, clamped to `[0, 1e4]`.
pub fn adaptive_adv_factor<T: Real>(g: &mut Graph<T>, m: &LossInputs, reconstruction: Var, target: Var) -> Result<f64> {
    let probe = g.leaf(g.value(reconstruction).clone(), true);
    let rec = g.l1_loss(probe, target)?;
    let logits = m.disc.forward(g, m.disc_params, probe)?;
    let gen = hinge_gen_term(g, logits)?;
    let norm = |loss: Var| -> Result<f64> {
        let grads = g.backward(loss)?;
        Ok(grads
            .get(probe)
            .map_or(0.0, |t| t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()))
    };
    let (r, a) = (norm(rec)?, norm(gen)?);
    Ok((r / (a + 1e-4)).clamp(0.0, 1e4))
}

fn weighted<T: Real>(g: &mut Graph<T>, acc: Var, term: Var, w: f64) -> Result<Var> {
    let t = g.affine(term, w, 0.0)?;
    g.add(acc, t)
}

/// Builds the full objective for video `x` with posterior noise `noise`.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<T>,
    m: &LossInputs,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    w: &LossWeights,
    psi: &PsiSpec,
    step: usize,
) -> Result<LossGraph> {
    w.validate()?;
    if w.needs_image() && m.image.is_none() {
        return Err(Error::Config("alignment weights are set but no image VAE was given".into()));
    }
    let xv = g.input(x.clone());
    let post = in_term("encode", m.video.encode_graph(g, m.video_params, xv))?;
    let z = in_term("sample", reparameterize(g, &post, noise.clone()))?;
    let reconstruction = in_term("decode", m.video.decode_graph(g, m.video_params, z))?;
    let rec = in_term("rec", g.l1_loss(reconstruction, xv))?;
    let kl = in_term("kl", kl_term(g, post.mean, post.log_variance))?;
    let mut total = in_term("kl", weighted(g, rec, kl, w.kl_weight))?;

    let mut gen = None;
    let mut adv_factor = 1.0;
    if w.adv_active(step) {
        if w.adaptive_adv {
            adv_factor = in_term("gen", adaptive_adv_factor(g, m, reconstruction, xv))?;
        }
        let logits = in_term("gen", m.disc.forward(g, m.disc_params, reconstruction))?;
        let v = in_term("gen", hinge_gen_term(g, logits))?;
        total = in_term("gen", weighted(g, total, v, w.adv_weight * adv_factor))?;
        gen = Some(v);
    }
    let mut reg_dec = None;
    let mut reg_enc = None;
    if let Some(image) = &m.image {
        if w.lambda1 > 0.0 {
            let target = map_psi(psi, x)?;
            let v = in_term("reg_dec", reg_decoder_term(g, image, z, &target))?;
            total = in_term("reg_dec", weighted(g, total, v, w.lambda1))?;
            reg_dec = Some(v);
        }
        if w.lambda2 > 0.0 {
            let mapped = map_psi(psi, x)?;
            let v = in_term("reg_enc", reg_encoder_term(g, image, m.video, m.video_params, xv, &mapped))?;
            total = in_term("reg_enc", weighted(g, total, v, w.lambda2))?;
            reg_enc = Some(v);
        }
    }
    Ok(LossGraph {
        total,
        reconstruction,
        rec,
        kl,
        gen,
        reg_dec,
        reg_enc,
        adv_factor,
    })
}

/// Evaluates the objective without gradients.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    video: &Vae,
    video_params: &ParamStore<T>,
    disc: &Discriminator,
    disc_params: &ParamStore<T>,
    image: Option<(&Vae, &ParamStore<T>)>,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    w: &LossWeights,
    psi: &PsiSpec,
    step: usize,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vp = video_params.bind(&mut g, false);
    let dp = disc_params.bind(&mut g, false);
    let ip = image.map(|(_, p)| p.bind(&mut g, false));
    let inputs = LossInputs {
        video,
        video_params: &vp,
        disc,
        disc_params: &dp,
        image: image.zip(ip.as_ref()).map(|((vae, _), params)| FrozenImage { vae, params }),
    };
    let l = total_loss_graph(&mut g, &inputs, x, noise, w, psi, step)?;
    Ok(LossBreakdown::read(&g, &l))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn posterior(mean: f64, lv: f64) -> LatentPosterior<f64> {
        let t = |v| Tensor::full(&[1, 1, 2, 2, 2], v);
        LatentPosterior {
            mean: t(mean),
            log_variance: t(lv),
            noise: t(0.0),
            sample: t(mean),
        }
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_loss(&posterior(0.0, 0.0)), 0.0);
        assert!((kl_loss(&posterior(1.0, 0.0)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_graph_matches_tensor_form() {
        let p = posterior(0.3, -0.7);
        let mut g = Graph::new();
        let m = g.input(p.mean.clone());
        let lv = g.input(p.log_variance.clone());
        let k = kl_term(&mut g, m, lv).unwrap();
        assert!((g.value(k).item() - kl_loss(&p)).abs() < 1e-12);
    }

    #[test]
    fn hinge_margins() {
        let mut g = Graph::<f64>::new();
        let r = g.input(Tensor::full(&[3], 1.5));
        let f = g.input(Tensor::full(&[3], -2.0));
        let d = hinge_disc_term(&mut g, r, f).unwrap();
        let gen = hinge_gen_term(&mut g, f).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
        assert_eq!(g.value(gen).item(), 2.0);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            lambda2: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
