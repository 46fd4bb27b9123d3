use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vidvae::config::KeyValues;
use vidvae::data::{load_checkpoint, load_raw_video, psnr, save_checkpoint, save_raw_video, ssim, video_ssim};
use vidvae::error::{Error, Result};
use vidvae::experiments::{ab_compat, synthetic_datasets, train_loop, ExperimentConfig};
use vidvae::model::config::ModelConfig;
use vidvae::model::discriminator::Discriminator;
use vidvae::model::inflate::inflate_2d_to_3d;
use vidvae::model::params::ParamStore;
use vidvae::model::vae::Vae;
use vidvae::objective::trainer::{TrainConfig, Trainer};
use vidvae::regularization::PsiKind;
use vidvae::selftest::run_selftest;
use vidvae::tensor::Tensor;
use vidvae::tiling::{plan_tiles, tiled_decode, tiled_encode, SpatialTiling, TilePlan};

const PEAK: f64 = 2.0;

#[derive(Parser, Debug)]
#[command(name = "vidvae", version, about = "Spatio-temporal video VAE aligned with an image VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inflate an image-VAE checkpoint into a video-VAE checkpoint.
    Inflate(InflateArgs),
    /// Train a video VAE on synthetic clips.
    Train(TrainArgs),
    /// Encode a raw video into posterior-mean latents.
    Encode(CodecArgs),
    /// Decode latents into a raw video.
    Decode(CodecArgs),
    /// Reconstruct a raw video and report PSNR and SSIM.
    Eval(EvalArgs),
    /// Run the invariant suite.
    Selftest,
    /// Train aligned and independent twins and compare cross-decoding.
    AbCompat(AbArgs),
}

#[derive(Args, Debug)]
struct InflateArgs {
    #[arg(long)]
    ckpt_in: PathBuf,
    #[arg(long)]
    ckpt_out: PathBuf,
    /// `model.*` keys override the video topology.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt_in: Option<PathBuf>,
    #[arg(long)]
    ckpt_out: PathBuf,
    #[arg(long)]
    image_ckpt: Option<PathBuf>,
    /// Metric log path; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    psi: Option<PsiKind>,
}

#[derive(Args, Debug)]
struct TileArgs {
    /// Latent frames per temporal block.
    #[arg(long)]
    tile_frames: Option<usize>,
    /// Spatial tile edge in pixels.
    #[arg(long, requires = "tile_frames")]
    tile_hw: Option<usize>,
    #[arg(long, requires = "tile_hw", default_value_t = 0)]
    tile_overlap: usize,
}

#[derive(Args, Debug)]
struct CodecArgs {
    #[arg(long)]
    ckpt_in: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    tile: TileArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt_in: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Report path; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    per_frame: bool,
    #[command(flatten)]
    tile: TileArgs,
}

#[derive(Args, Debug)]
struct AbArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{}", e);
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("code=1 kind=usage msg={}", first);
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("code={} kind={} msg={}", e.exit_code(), e.kind(), msg);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Inflate(a) => inflate(a)?,
        Command::Train(a) => train(a)?,
        Command::Encode(a) => encode(a)?,
        Command::Decode(a) => decode(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Selftest => return Ok(selftest()),
        Command::AbCompat(a) => ab(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn read_kv(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::parse(&std::fs::read_to_string(p)?),
        None => Ok(KeyValues::new()),
    }
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

/// The video topology derived from an image config, with `model.*` overrides.
fn video_config_for(image: &ModelConfig, kv: &KeyValues) -> Result<ModelConfig> {
    let desk = ModelConfig::desk_video();
    let base = image.to_video(desk.conv_mix, desk.temporal_down_levels, desk.temporal_kernel);
    ModelConfig::from_kv(&kv.with_prefix("model."), &base)
}

fn load_image(path: &Path) -> Result<(Vae, ParamStore<f32>)> {
    let (mut params, cfg) = load_checkpoint(path)?;
    if !cfg.is_image() {
        return Err(Error::Config(format!("{} is not an all-2d checkpoint", path.display())));
    }
    params.split_off_prefix("disc.");
    Ok((Vae::new(&cfg)?, params))
}

fn inflate(a: InflateArgs) -> Result<()> {
    let (params, image_cfg) = load_checkpoint(&a.ckpt_in)?;
    let video_cfg = video_config_for(&image_cfg, &read_kv(a.config.as_deref())?)?;
    let inflated = inflate_2d_to_3d(&params, &image_cfg, &video_cfg)?;
    save_checkpoint(&a.ckpt_out, &inflated, &video_cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let kv = read_kv(a.config.as_deref())?;
    let mut tc = TrainConfig::from_kv(&kv)?;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(l) = a.lambda1 {
        tc.weights.lambda1 = l;
    }
    if let Some(l) = a.lambda2 {
        tc.weights.lambda2 = l;
    }
    if let Some(p) = a.psi {
        tc.psi = p;
    }
    tc.weights.validate()?;
    let image = a.image_ckpt.as_deref().map(load_image).transpose()?;

    let (config, mut params) = match (&a.ckpt_in, &image) {
        (Some(path), _) => {
            let (p, cfg) = load_checkpoint(path)?;
            (cfg, p)
        }
        (None, Some((vae, ip))) => {
            let cfg = video_config_for(&vae.config, &kv)?;
            let p = inflate_2d_to_3d(ip, &vae.config, &cfg)?;
            (cfg, p)
        }
        (None, None) => {
            let cfg = ModelConfig::from_kv(&kv.with_prefix("model."), &ModelConfig::desk_video())?;
            let p = Vae::new(&cfg)?.init_params(tc.seed)?;
            (cfg, p)
        }
    };
    let mut disc_params = params.split_off_prefix("disc.");
    if disc_params.is_empty() {
        disc_params = Discriminator::new(&config)?.init_params(tc.seed.wrapping_add(1))?;
    }
    let schedule = tc.batch_schedule(config.temporal_factor())?;
    let datasets = synthetic_datasets(tc.clip_frames, tc.clip_size, tc.clips_per_source, tc.seed)?;
    let mut trainer = Trainer::new(
        Vae::new(&config)?,
        params,
        disc_params,
        image,
        tc.weights,
        tc.psi,
        tc.optimizer,
        tc.lr_schedule(),
        tc.seed,
    )?;

    let mut log = writer(a.output.as_deref())?;
    let every = tc.checkpoint_every;
    let mut done = 0;
    while done < tc.steps {
        let chunk = if every > 0 { every.min(tc.steps - done) } else { tc.steps };
        let mut failure = None;
        train_loop(&mut trainer, &schedule, &datasets, chunk, tc.seed.wrapping_add(done as u64), |m| {
            if failure.is_none() {
                failure = writeln!(log, "{}", m.to_line()).err();
            }
        })?;
        if let Some(e) = failure {
            return Err(e.into());
        }
        done += chunk;
        if every > 0 && done < tc.steps {
            let path = format!("{}.step{}", a.ckpt_out.display(), done);
            save_checkpoint(path, &trainer.merged_params()?, &config)?;
        }
    }
    log.flush()?;
    save_checkpoint(&a.ckpt_out, &trainer.merged_params()?, &config)
}

fn load_model(path: &Path) -> Result<(Vae, ParamStore<f32>)> {
    let (mut params, cfg) = load_checkpoint(path)?;
    params.split_off_prefix("disc.");
    Ok((Vae::new(&cfg)?, params))
}

fn tile_plan(vae: &Vae, t: &TileArgs, frames: usize, height: usize, width: usize) -> Result<Option<TilePlan>> {
    let Some(f) = t.tile_frames else { return Ok(None) };
    let spatial = t.tile_hw.map(|tile| {
        (
            SpatialTiling {
                tile,
                overlap: t.tile_overlap,
            },
            height,
            width,
            vae.config.spatial_factor(),
        )
    });
    plan_tiles(frames, f, vae.config.temporal_factor(), spatial).map(Some)
}

fn encode_video(vae: &Vae, params: &ParamStore<f32>, video: &Tensor<f32>, t: &TileArgs) -> Result<Tensor<f32>> {
    let [_, frames, h, w, _] = video.dims5()?;
    match tile_plan(vae, t, frames, h, w)? {
        Some(plan) => tiled_encode(vae, params, video, &plan),
        None => Ok(vae.encode(params, video, None)?.mean),
    }
}

fn decode_latent(vae: &Vae, params: &ParamStore<f32>, latent: &Tensor<f32>, t: &TileArgs) -> Result<Tensor<f32>> {
    let [_, frames, h, w, _] = vae.video_shape(latent.shape())?;
    match tile_plan(vae, t, frames, h, w)? {
        Some(plan) => tiled_decode(vae, params, latent, &plan),
        None => vae.decode(params, latent),
    }
}

fn encode(a: CodecArgs) -> Result<()> {
    let (vae, params) = load_model(&a.ckpt_in)?;
    let video = load_raw_video(&a.input)?;
    save_raw_video(&a.output, &encode_video(&vae, &params, &video, &a.tile)?)
}

fn decode(a: CodecArgs) -> Result<()> {
    let (vae, params) = load_model(&a.ckpt_in)?;
    let latent = load_raw_video(&a.input)?;
    save_raw_video(&a.output, &decode_latent(&vae, &params, &latent, &a.tile)?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let (vae, params) = load_model(&a.ckpt_in)?;
    let video = load_raw_video(&a.input)?;
    let latent = encode_video(&vae, &params, &video, &a.tile)?;
    let rec = decode_latent(&vae, &params, &latent, &a.tile)?;
    let [_, frames, h, w, c] = video.dims5()?;
    let mut out = writer(a.output.as_deref())?;
    writeln!(out, "frames={}", frames)?;
    writeln!(out, "mse={:.8}", rec.mse(&video)?)?;
    writeln!(out, "psnr={:.4}", psnr(&rec, &video, PEAK)?)?;
    writeln!(out, "ssim={:.6}", video_ssim(&rec, &video, PEAK)?)?;
    if a.per_frame {
        for t in 0..frames {
            let x = video.slice_time(t, 1)?.reshape(&[h, w, c])?;
            let y = rec.slice_time(t, 1)?.reshape(&[h, w, c])?;
            writeln!(out, "psnr.{}={:.4}", t, psnr(&y, &x, PEAK)?)?;
            writeln!(out, "ssim.{}={:.6}", t, ssim(&y, &x, PEAK)?)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn selftest() -> ExitCode {
    let outcomes = run_selftest();
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("selftest passed={} failed={}", outcomes.len() - failed, failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("code=1 kind=selftest msg={} properties failed", failed);
        ExitCode::from(1)
    }
}

fn ab(a: AbArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let report = ab_compat(&cfg, |name, m| {
        if m.step % 100 == 0 {
            eprintln!("{} {}", name, m.to_line());
        }
    })?;
    let mut out = writer(a.output.as_deref())?;
    write!(out, "{}", report.to_text())?;
    out.flush()?;
    Ok(())
}
