//! Desk-scale experiments on synthetic video: image-VAE pretraining,
//! aligned-vs-independent twins (cross-decode compatibility) and the
//! mapping-function ablation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::synthetic::{gen_synthetic, SyntheticKind, SyntheticVideoSpec};
use crate::error::Result;
use crate::model::config::{ConvMix, ModelConfig};
use crate::model::discriminator::Discriminator;
use crate::model::inflate::inflate_2d_to_3d;
use crate::model::params::ParamStore;
use crate::model::vae::Vae;
use crate::objective::losses::LossWeights;
use crate::objective::optim::{AdamWConfig, LrSchedule};
use crate::objective::schedule::{sample_batch, BatchSchedule, Datasets, ScheduleEntry};
use crate::objective::trainer::{StepMetrics, Trainer};
use crate::regularization::{map_psi, PsiKind, PsiSpec};
use crate::tensor::Tensor;

/// Budget and data shared by the experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub video: ModelConfig,
    pub image_steps: usize,
    pub image_lr: f64,
    pub steps: usize,
    pub lr: f64,
    pub frames: usize,
    pub size: usize,
    pub clips_per_source: usize,
    pub eval_clips: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            video: ModelConfig::desk_video(),
            image_steps: 2000,
            image_lr: 1e-3,
            steps: 1000,
            lr: 5e-4,
            frames: 9,
            size: 32,
            clips_per_source: 64,
            eval_clips: 8,
            seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn image_config(&self) -> ModelConfig {
        self.video.to_image()
    }
}

/// `clips` synthetic clips of every kind, keyed by kind name.
pub fn synthetic_datasets(frames: usize, size: usize, clips: usize, seed: u64) -> Result<Datasets> {
    let mut out = Datasets::new();
    for (k, kind) in SyntheticKind::ALL.into_iter().enumerate() {
        let pool = (0..clips)
            .map(|i| {
                let s = seed.wrapping_mul(1_000_003).wrapping_add((k * 10_000 + i) as u64);
                gen_synthetic(&SyntheticVideoSpec::new(kind, frames, size, size, s))
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(kind.to_string(), pool);
    }
    Ok(out)
}

/// Held-out clips cycling through every kind.
pub fn eval_clips(frames: usize, size: usize, count: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    (0..count)
        .map(|i| {
            let kind = SyntheticKind::ALL[i % SyntheticKind::ALL.len()];
            gen_synthetic(&SyntheticVideoSpec::new(kind, frames, size, size, seed ^ (0xE7A1 + i as u64)))
        })
        .collect()
}

/// Every source in equal proportion with `frames`-frame batches of one clip.
pub fn uniform_schedule(frames: usize, size: usize, rho_t: usize) -> Result<BatchSchedule> {
    let p = 1.0 / SyntheticKind::ALL.len() as f64;
    BatchSchedule::new(
        SyntheticKind::ALL
            .iter()
            .map(|k| ScheduleEntry {
                source: k.to_string(),
                frames,
                height: size,
                width: size,
                batch: 1,
                probability: p,
            })
            .collect(),
        rho_t,
    )
}

/// Runs `steps` training steps on batches drawn from `schedule`.
pub fn train_loop(
    trainer: &mut Trainer,
    schedule: &BatchSchedule,
    datasets: &Datasets,
    steps: usize,
    seed: u64,
    mut log: impl FnMut(&StepMetrics),
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..steps {
        let (_, batch) = sample_batch(schedule, datasets, &mut rng)?;
        let m = trainer.step(&batch)?;
        log(&m);
    }
    Ok(())
}

/// Trains an all-2d image VAE on single frames (reconstruction and KL only).
pub fn pretrain_image_vae(cfg: &ExperimentConfig, datasets: &Datasets) -> Result<(Vae, ParamStore<f32>)> {
    let image_cfg = cfg.image_config();
    let vae = Vae::new(&image_cfg)?;
    let params = vae.init_params(cfg.seed)?;
    let disc = Discriminator::new(&image_cfg)?.init_params(cfg.seed + 1)?;
    let weights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        adv_weight: 0.0,
        ..Default::default()
    };
    let optimizer = AdamWConfig {
        lr: cfg.image_lr,
        ..Default::default()
    };
    let mut trainer = Trainer::new(
        vae,
        params,
        disc,
        None,
        weights,
        PsiKind::First,
        optimizer,
        LrSchedule::Cosine { total: cfg.image_steps },
        cfg.seed,
    )?;
    let mut schedule = uniform_schedule(1, cfg.size, 1)?;
    for e in &mut schedule.entries {
        e.batch = 4;
    }
    train_loop(&mut trainer, &schedule, datasets, cfg.image_steps, cfg.seed + 2, |_| {})?;
    Ok((trainer.video, trainer.params))
}

/// How a video VAE's weights start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VideoInit {
    /// Inflated from the frozen image VAE.
    Inflated,
    /// Fresh random weights from the experiment seed.
    Scratch,
}

/// Trains a video VAE against the frozen image VAE.
pub fn train_video_vae(
    cfg: &ExperimentConfig,
    image: &(Vae, ParamStore<f32>),
    datasets: &Datasets,
    weights: LossWeights,
    psi: PsiKind,
    init: VideoInit,
    log: impl FnMut(&StepMetrics),
) -> Result<(Vae, ParamStore<f32>)> {
    let vae = Vae::new(&cfg.video)?;
    let params = match init {
        VideoInit::Inflated => inflate_2d_to_3d(&image.1, &image.0.config, &cfg.video)?,
        VideoInit::Scratch => vae.init_params(cfg.seed + 6)?,
    };
    let disc = Discriminator::new(&cfg.video)?.init_params(cfg.seed + 3)?;
    let optimizer = AdamWConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut trainer = Trainer::new(
        vae,
        params,
        disc,
        Some(image.clone()),
        weights,
        psi,
        optimizer,
        LrSchedule::Constant,
        cfg.seed + 4,
    )?;
    let schedule = uniform_schedule(cfg.frames, cfg.size, cfg.video.temporal_factor())?;
    train_loop(&mut trainer, &schedule, datasets, cfg.steps, cfg.seed + 5, log)?;
    Ok((trainer.video, trainer.params))
}

/// Mean per-clip MSE between clips and their reconstructions (posterior mean).
pub fn reconstruction_mse(vae: &Vae, params: &ParamStore<f32>, clips: &[Tensor<f32>]) -> Result<f64> {
    let mut total = 0.0;
    for x in clips {
        total += vae.reconstruct(params, x)?.mse(x)?;
    }
    Ok(total / clips.len().max(1) as f64)
}

/// Mean MSE between the frozen image decoder's decoding of video latents
/// (posterior mean) and the slice-mapped clip.
pub fn cross_decode_mse(
    video: &Vae,
    video_params: &ParamStore<f32>,
    image: &(Vae, ParamStore<f32>),
    clips: &[Tensor<f32>],
) -> Result<f64> {
    let psi = PsiSpec::new(PsiKind::Slice, video.config.temporal_factor(), 0);
    let mut total = 0.0;
    for x in clips {
        let z = video.encode(video_params, x, None)?.mean;
        let decoded = image.0.decode(&image.1, &z)?;
        total += decoded.mse(&map_psi(&psi, x)?)?;
    }
    Ok(total / clips.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmokeReport {
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Trains a freshly initialized video VAE with `λ1 = 1` against a briefly
/// pretrained image VAE and measures held-out reconstruction MSE before and
/// after `steps` steps.
pub fn training_smoke(cfg: &ExperimentConfig, steps: usize, log: impl FnMut(&StepMetrics)) -> Result<SmokeReport> {
    let datasets = synthetic_datasets(cfg.frames, cfg.size, cfg.clips_per_source, cfg.seed)?;
    let image = pretrain_image_vae(cfg, &datasets)?;
    let eval = eval_clips(cfg.frames, cfg.size, cfg.eval_clips, cfg.seed)?;
    let vae = Vae::new(&cfg.video)?;
    let initial_mse = reconstruction_mse(&vae, &vae.init_params(cfg.seed + 6)?, &eval)?;
    let weights = LossWeights {
        lambda1: 1.0,
        lambda2: 0.0,
        ..Default::default()
    };
    let run = ExperimentConfig { steps, ..cfg.clone() };
    let (vae, params) = train_video_vae(&run, &image, &datasets, weights, PsiKind::Random, VideoInit::Scratch, log)?;
    Ok(SmokeReport {
        initial_mse,
        final_mse: reconstruction_mse(&vae, &params, &eval)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbCompatReport {
    pub image_mse: f64,
    pub aligned_cross_mse: f64,
    pub independent_cross_mse: f64,
    pub aligned_video_mse: f64,
    pub independent_video_mse: f64,
}

impl AbCompatReport {
    /// `independent_cross_mse / aligned_cross_mse`
    pub fn ratio(&self) -> f64 {
        self.independent_cross_mse / self.aligned_cross_mse
    }

    pub fn to_text(&self) -> String {
        format!(
            "image_mse={:.6}\naligned_cross_mse={:.6}\nindependent_cross_mse={:.6}\ncross_ratio={:.3}\naligned_video_mse={:.6}\nindependent_video_mse={:.6}\n",
            self.image_mse,
            self.aligned_cross_mse,
            self.independent_cross_mse,
            self.ratio(),
            self.aligned_video_mse,
            self.independent_video_mse
        )
    }
}

/// Twins sharing one fresh initialization, trained against a frozen image
/// VAE with `λ1 = 1` and with `λ1 = λ2 = 0`, compared by cross-decoding with
/// the image decoder.
pub fn ab_compat(cfg: &ExperimentConfig, mut log: impl FnMut(&str, &StepMetrics)) -> Result<AbCompatReport> {
    let datasets = synthetic_datasets(cfg.frames, cfg.size, cfg.clips_per_source, cfg.seed)?;
    let image = pretrain_image_vae(cfg, &datasets)?;
    let eval = eval_clips(cfg.frames, cfg.size, cfg.eval_clips, cfg.seed)?;
    let frames: Vec<Tensor<f32>> = eval.iter().map(|x| x.slice_time(0, 1)).collect::<Result<_>>()?;
    let image_mse = reconstruction_mse(&image.0, &image.1, &frames)?;
    let aligned_w = LossWeights {
        lambda1: 1.0,
        lambda2: 0.0,
        ..Default::default()
    };
    let independent_w = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        ..Default::default()
    };
    let aligned = train_video_vae(cfg, &image, &datasets, aligned_w, PsiKind::Random, VideoInit::Scratch, |m| {
        log("aligned", m)
    })?;
    let independent = train_video_vae(cfg, &image, &datasets, independent_w, PsiKind::Random, VideoInit::Scratch, |m| {
        log("independent", m)
    })?;
    Ok(AbCompatReport {
        image_mse,
        aligned_cross_mse: cross_decode_mse(&aligned.0, &aligned.1, &image, &eval)?,
        independent_cross_mse: cross_decode_mse(&independent.0, &independent.1, &image, &eval)?,
        aligned_video_mse: reconstruction_mse(&aligned.0, &aligned.1, &eval)?,
        independent_video_mse: reconstruction_mse(&independent.0, &independent.1, &eval)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsiRow {
    pub psi: PsiKind,
    pub video_mse: f64,
    pub image_mse: f64,
    pub cross_mse: f64,
}

/// One decoder-aligned video VAE per mapping function under identical budgets.
pub fn psi_ablation(cfg: &ExperimentConfig, mut log: impl FnMut(PsiKind, &StepMetrics)) -> Result<Vec<PsiRow>> {
    let datasets = synthetic_datasets(cfg.frames, cfg.size, cfg.clips_per_source, cfg.seed)?;
    let image = pretrain_image_vae(cfg, &datasets)?;
    let eval = eval_clips(cfg.frames, cfg.size, cfg.eval_clips, cfg.seed)?;
    let stills: Vec<Tensor<f32>> = eval.iter().map(|x| x.slice_time(0, 1)).collect::<Result<_>>()?;
    let weights = LossWeights {
        lambda1: 1.0,
        lambda2: 0.0,
        ..Default::default()
    };
    PsiKind::ALL
        .into_iter()
        .map(|psi| {
            let (vae, params) = train_video_vae(cfg, &image, &datasets, weights, psi, VideoInit::Inflated, |m| log(psi, m))?;
            Ok(PsiRow {
                psi,
                video_mse: reconstruction_mse(&vae, &params, &eval)?,
                image_mse: reconstruction_mse(&vae, &params, &stills)?,
                cross_mse: cross_decode_mse(&vae, &params, &image, &eval)?,
            })
        })
        .collect()
}

/// The hybrid and all-3d variants of a video config.
pub fn mix_variants(config: &ModelConfig) -> (ModelConfig, ModelConfig) {
    let kt = config.temporal_kernel;
    let levels = config.temporal_down_levels;
    (
        config.to_video(ConvMix::Hybrid2d3d, levels, kt),
        config.to_video(ConvMix::All3d, levels, kt),
    )
}
