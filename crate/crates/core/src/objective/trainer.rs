//! Alternating generator/discriminator training loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::discriminator::Discriminator;
use crate::model::params::ParamStore;
use crate::model::vae::Vae;
use crate::objective::losses::{hinge_disc_term, total_loss_graph, LossBreakdown, LossInputs, LossWeights};
use crate::objective::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::objective::schedule::{BatchSchedule, ScheduleEntry};
use crate::regularization::{FrozenImage, PsiKind, PsiSpec};
use crate::tensor::Tensor;

/// Settings of a training run, readable from `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub cosine: bool,
    pub psi: PsiKind,
    pub seed: u64,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub schedule: Vec<ScheduleEntry>,
    /// Clips generated per synthetic source.
    pub clips_per_source: usize,
    pub clip_frames: usize,
    pub clip_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let entry = |source: &str, frames, batch, probability| ScheduleEntry {
            source: source.into(),
            frames,
            height: 16,
            width: 16,
            batch,
            probability,
        };
        TrainConfig {
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            cosine: false,
            psi: PsiKind::Random,
            seed: 0,
            steps: 500,
            checkpoint_every: 0,
            schedule: vec![
                entry("bouncing-disc", 9, 1, 0.4),
                entry("moving-rects", 9, 1, 0.1),
                entry("drifting-gradient", 1, 2, 0.25),
                entry("textured-noise-pan", 9, 1, 0.25),
            ],
            clips_per_source: 8,
            clip_frames: 17,
            clip_size: 24,
        }
    }
}

const KEYS: &[&str] = &[
    "lambda1",
    "lambda2",
    "kl_weight",
    "adv_weight",
    "adv_start",
    "adaptive_adv",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "cosine",
    "psi",
    "seed",
    "steps",
    "checkpoint_every",
    "clips_per_source",
    "clip_frames",
    "clip_size",
];

impl TrainConfig {
    /// Reads training keys; `schedule.<n>` keys replace the default schedule
    /// and `model.*` keys are left for the model config.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let own: Vec<&str> = kv
            .keys()
            .filter(|k| !k.starts_with("model.") && !k.starts_with("schedule."))
            .collect();
        for k in own {
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown training key {:?}", k)));
            }
        }
        let mut c = TrainConfig::default();
        macro_rules! read {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        read!("lambda1", c.weights.lambda1);
        read!("lambda2", c.weights.lambda2);
        read!("kl_weight", c.weights.kl_weight);
        read!("adv_weight", c.weights.adv_weight);
        read!("adv_start", c.weights.adv_start);
        read!("adaptive_adv", c.weights.adaptive_adv);
        read!("lr", c.optimizer.lr);
        read!("beta1", c.optimizer.beta1);
        read!("beta2", c.optimizer.beta2);
        read!("eps", c.optimizer.eps);
        read!("weight_decay", c.optimizer.weight_decay);
        read!("cosine", c.cosine);
        read!("seed", c.seed);
        read!("steps", c.steps);
        read!("checkpoint_every", c.checkpoint_every);
        read!("clips_per_source", c.clips_per_source);
        read!("clip_frames", c.clip_frames);
        read!("clip_size", c.clip_size);
        if let Some(p) = kv.get_str("psi") {
            c.psi = p.parse()?;
        }
        let sched = kv.with_prefix("schedule.");
        if sched.keys().next().is_some() {
            c.schedule = sched
                .keys()
                .map(|k| sched.get_str(k).unwrap().parse())
                .collect::<Result<Vec<_>>>()?;
        }
        c.weights.validate()?;
        c.optimizer.validate()?;
        Ok(c)
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        if self.cosine {
            LrSchedule::Cosine { total: self.steps }
        } else {
            LrSchedule::Constant
        }
    }

    pub fn batch_schedule(&self, rho_t: usize) -> Result<BatchSchedule> {
        BatchSchedule::new(self.schedule.clone(), rho_t)
    }
}

/// Metrics of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub disc_loss: Option<f64>,
    pub seconds: f64,
}

impl StepMetrics {
    /// One `key=value` log line.
    pub fn to_line(&self) -> String {
        let l = &self.losses;
        let disc = self.disc_loss.map_or("off".to_string(), |d| format!("{:.6}", d));
        format!(
            "step={} total={:.6} rec={:.6} kl={:.6} gen={:.6} adv_factor={:.4} reg_dec={:.6} reg_enc={:.6} disc={} lr={:.3e} time={:.3}",
            self.step, l.total, l.rec, l.kl, l.gen, l.adv_factor, l.reg_dec, l.reg_enc, disc, self.lr, self.seconds
        )
    }
}

/// A video VAE, its discriminator and an optional frozen image VAE, with
/// optimizer state.
pub struct Trainer {
    pub video: Vae,
    pub disc: Discriminator,
    pub image: Option<(Vae, ParamStore<f32>)>,
    pub params: ParamStore<f32>,
    pub disc_params: ParamStore<f32>,
    pub weights: LossWeights,
    pub psi: PsiKind,
    pub lr_schedule: LrSchedule,
    opt: AdamW,
    disc_opt: AdamW,
    step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        video: Vae,
        params: ParamStore<f32>,
        disc_params: ParamStore<f32>,
        image: Option<(Vae, ParamStore<f32>)>,
        weights: LossWeights,
        psi: PsiKind,
        optimizer: AdamWConfig,
        lr_schedule: LrSchedule,
        seed: u64,
    ) -> Result<Self> {
        weights.validate()?;
        if weights.needs_image() && image.is_none() {
            return Err(Error::Config("alignment weights need a frozen image VAE".into()));
        }
        let disc = Discriminator::new(&video.config)?;
        Ok(Trainer {
            video,
            disc,
            image,
            params,
            disc_params,
            weights,
            psi,
            lr_schedule,
            opt: AdamW::new(optimizer)?,
            disc_opt: AdamW::new(optimizer)?,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One generator update on the full objective, then one discriminator
    /// update once the adversarial term is active.
    pub fn step(&mut self, batch: &Tensor<f32>) -> Result<StepMetrics> {
        let start = Instant::now();
        let step = self.step;
        let lr_factor = self.lr_schedule.factor(step);
        let latent = self.video.latent_shape(batch.shape())?;
        let noise = Tensor::randn(&latent, 1.0, &mut self.rng);
        let psi = PsiSpec::new(self.psi, self.video.config.temporal_factor(), self.rng.gen());

        let mut g = Graph::new();
        let vp = self.params.bind(&mut g, true);
        let dp = self.disc_params.bind(&mut g, false);
        let ip = self.image.as_ref().map(|(_, p)| p.bind(&mut g, false));
        let inputs = LossInputs {
            video: &self.video,
            video_params: &vp,
            disc: &self.disc,
            disc_params: &dp,
            image: self
                .image
                .as_ref()
                .zip(ip.as_ref())
                .map(|((vae, _), params)| FrozenImage { vae, params }),
        };
        let l = total_loss_graph(&mut g, &inputs, batch, &noise, &self.weights, &psi, step)?;
        let losses = LossBreakdown::read(&g, &l);
        let grads = g.backward(l.total)?;
        self.params.accumulate_grads(&vp, &grads);
        self.opt.step(&mut self.params, lr_factor);
        let fake = g.value(l.reconstruction).clone();
        drop(grads);
        drop(g);

        let mut disc_loss = None;
        if self.weights.adv_active(step) {
            let mut g = Graph::new();
            let dp = self.disc_params.bind(&mut g, true);
            let real = g.input(batch.clone());
            let fake = g.input(fake);
            let lr = self.disc.forward(&mut g, &dp, real)?;
            let lf = self.disc.forward(&mut g, &dp, fake)?;
            let d = hinge_disc_term(&mut g, lr, lf).map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFinite {
                    op: format!("disc ({})", op),
                },
                other => other,
            })?;
            disc_loss = Some(g.value(d).item() as f64);
            let grads = g.backward(d)?;
            self.disc_params.accumulate_grads(&dp, &grads);
            self.disc_opt.step(&mut self.disc_params, lr_factor);
        }
        self.step += 1;
        Ok(StepMetrics {
            step,
            lr: self.opt.config.lr * lr_factor,
            losses,
            disc_loss,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// All trainable parameters (VAE and discriminator) in one store.
    pub fn merged_params(&self) -> Result<ParamStore<f32>> {
        let mut all = self.params.clone();
        all.merge(self.disc_params.clone())?;
        Ok(all)
    }
}
