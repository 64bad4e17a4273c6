//! `sdtalk`: make data, train, sample, evaluate and benchmark.
//!
//! Failures exit with status 2 and print exactly one line to stderr:
//! `error kind=<kind> msg=<message>`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ndarray::{s, Axis};

use sdtalk_core::adapter::{make_default_masks, AdapterKind, RegionMasks};
use sdtalk_core::audio::{embed_audio, AudioClip, AudioEmbedding, FeaturizerCfg, DEFAULT_FPS};
use sdtalk_core::bench::{compare, flops_table, BenchCfg};
use sdtalk_core::config::{load_checkpoint, load_toml, save_checkpoint, CheckpointMeta, RunConfig};
use sdtalk_core::diffusion::Trainer;
use sdtalk_core::faces::{gen_video_sample, make_dataset, read_dataset, write_dataset};
use sdtalk_core::metrics::{evaluate, write_csv, EvalRow};
use sdtalk_core::pipeline::{audio_energy, init_params, moving_average, sample_clip, training_pool, SampleOpts};
use sdtalk_core::tensor_file::TensorFile;
use sdtalk_core::Error;

#[derive(Parser)]
#[command(
    name = "sdtalk",
    version,
    about = "Semi-decoupled audio attention for a toy talking-face model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and print its manifest digest.
    MakeData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose `[data.scene]` section sets the scene.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a denoiser; writes checkpoint.sdtf, checkpoint.txt, loss.csv and config.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate a clip from a checkpoint for a WAV file or a synthetic seed.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "seed", required_unless_present = "seed")]
        audio: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also dump frames as PGM images into this directory.
        #[arg(long)]
        pgm: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Noise seed for sampling.
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Score every clip in a directory and write a CSV.
    Eval {
        #[arg(long)]
        videos: PathBuf,
        /// Mask file; default masks for the frame size when omitted.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        max_lag: usize,
    },
    /// Time semi- against fully-decoupled inference and write JSON.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the MAC table for both adapter kinds.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let kind = e.downcast_ref::<Error>().map_or("other", error_kind);
        let msg = format!("{e:#}").replace('\n', " ");
        eprintln!("error kind={kind} msg={msg}");
        std::process::exit(2);
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::NonFinite(_) => "non_finite",
        Error::InvalidConfig(_) => "invalid_config",
        Error::Format(_) => "format",
        Error::Truncated { .. } => "truncated",
        Error::MissingTensor(_) => "missing_tensor",
        Error::Diverged { .. } => "diverged",
        Error::TimerResolution(_) => "timer_resolution",
        Error::Io { .. } => "io",
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::MakeData { n, seed, out, config } => make_data(n, seed, &out, config.as_deref()),
        Cmd::Train { config, out, data } => train(&config, &out, data.as_deref()),
        Cmd::Sample {
            checkpoint,
            audio,
            seed,
            out,
            pgm,
            config,
            noise_seed,
        } => sample(
            &checkpoint,
            audio.as_deref(),
            seed,
            &out,
            pgm.as_deref(),
            config.as_deref(),
            noise_seed,
        ),
        Cmd::Eval {
            videos,
            masks,
            out,
            max_lag,
        } => eval(&videos, masks.as_deref(), &out, max_lag),
        Cmd::Bench { config, out } => bench(config.as_deref(), &out),
        Cmd::Flops { config } => {
            let cfg = bench_cfg(config.as_deref())?;
            print!("{}", flops_table(&cfg)?);
            println!("config_digest {}", cfg.digest());
            Ok(())
        }
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_env_overrides()?)
}

fn bench_cfg(path: Option<&Path>) -> Result<BenchCfg> {
    let cfg: BenchCfg = match path {
        Some(p) => load_toml(p)?,
        None => BenchCfg::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn make_data(n: usize, seed: u64, out: &Path, config: Option<&Path>) -> Result<()> {
    let scene = run_config(config)?.data.scene;
    let samples = make_dataset(n, seed, &scene)?;
    let digest = write_dataset(out, &samples, seed, &scene)?;
    println!("{digest}");
    Ok(())
}

fn train(config: &Path, out: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = run_config(Some(config))?;
    let (frozen, digest) = cfg.freeze()?;
    let samples = match data {
        Some(dir) => read_dataset(dir)?,
        None => make_dataset(cfg.data.samples, cfg.data.seed, &cfg.data.scene)?,
    };
    let (c, h, w) = samples[0].frame(0).shape();
    if c != 1 {
        bail!(Error::Shape(format!("expected 1-channel frames, got {c}")));
    }
    let masks = make_default_masks(h, w)?;
    let pool = training_pool(&samples, cfg.sample.context_radius);

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), &frozen)?;
    let mut trainer = Trainer::new(init_params(&cfg)?, cfg.noise_schedule()?, cfg.train_cfg())?;
    let losses = trainer.run(&pool, &masks, |_, _| {})?;

    let ma = moving_average(&losses, 50);
    let mut csv = String::from("step,loss,moving_avg,config_digest\n");
    for (i, (l, m)) in losses.iter().zip(&ma).enumerate() {
        if i % cfg.train.log_every == 0 || i + 1 == losses.len() {
            csv.push_str(&format!("{i},{l},{m},{digest}\n"));
        }
    }
    fs::write(out.join("loss.csv"), csv)?;
    save_checkpoint(
        out.join("checkpoint.sdtf"),
        &trainer.params,
        &CheckpointMeta {
            config_digest: digest.clone(),
            steps: losses.len(),
        },
    )?;
    let d = cfg.denoiser_cfg();
    let manifest =
        format!(
        "adapter = {}\nchannels = {}\nattn_dim = {}\nheads = {}\naudio_dim = {}\nblocks = {}\nzero_conv_kernel = {}\n\
         schedule = {} steps, beta {} -> {}\nseed = {}\nsteps = {}\nconfig_digest = {digest}\n",
        d.kind, d.channels, d.attn_dim, d.heads, d.audio_dim, d.blocks, d.zero_conv_kernel,
        cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.seed, losses.len()
    );
    fs::write(out.join("checkpoint.txt"), manifest)?;
    println!(
        "trained {} steps, loss {:.4} -> {:.4}, config {digest}",
        losses.len(),
        ma[0],
        ma[ma.len() - 1]
    );
    Ok(())
}

fn sample(
    checkpoint: &Path,
    audio_path: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    pgm: Option<&Path>,
    config: Option<&Path>,
    noise_seed: u64,
) -> Result<()> {
    let cfg = run_config(config)?;
    let (params, meta) = load_checkpoint(checkpoint)?;
    let audio = match (audio_path, seed) {
        (Some(path), _) => {
            let clip = AudioClip::read_wav(path, DEFAULT_FPS)?;
            let emb = embed_audio(&clip, &FeaturizerCfg::for_rates(clip.sample_rate, DEFAULT_FPS))?;
            let n = emb.len().min(cfg.data.scene.frames);
            AudioEmbedding::new(emb.tokens.slice(s![..n, ..]).to_owned())?
        }
        (None, Some(s)) => gen_video_sample(s, &cfg.data.scene)?.audio,
        (None, None) => bail!(Error::InvalidConfig("need --audio or --seed".into())),
    };
    let size = cfg.data.scene.size;
    let masks = make_default_masks(size, size)?;
    let schedule = cfg.noise_schedule()?;
    let frames = sample_clip(
        &audio,
        &masks,
        &params,
        &schedule,
        SampleOpts {
            steps: cfg.sample.steps,
            seed: noise_seed,
            context_radius: cfg.sample.context_radius,
        },
    )?;

    let mut f = TensorFile::new();
    f.set_meta("config_digest", &meta.config_digest)?;
    f.set_meta("adapter", params.cfg.kind.as_str())?;
    f.set_meta("noise_seed", &noise_seed.to_string())?;
    if let Some(s) = seed {
        f.set_meta("seed", &s.to_string())?;
    }
    f.push_array("frames", &frames)?;
    f.push_array("audio", &audio.tokens)?;
    f.write(out)?;

    if let Some(dir) = pgm {
        fs::create_dir_all(dir)?;
        for (t, frame) in frames.outer_iter().enumerate() {
            let img = frame.index_axis(Axis(0), 0);
            let (h, w) = img.dim();
            let mut bytes = format!("P5\n# config_digest={}\n{w} {h}\n255\n", meta.config_digest).into_bytes();
            bytes.extend(img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            fs::write(dir.join(format!("frame_{t:03}.pgm")), bytes)?;
        }
    }
    println!("wrote {} frames to {}", frames.dim().0, out.display());
    Ok(())
}

fn eval(videos: &Path, masks_path: Option<&Path>, out: &Path, max_lag: usize) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(videos)
        .with_context(|| format!("reading {}", videos.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "sdtf"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(Error::InvalidConfig(format!("no .sdtf clips in {}", videos.display())));
    }
    let mut masks: Option<RegionMasks> = masks_path.map(RegionMasks::load).transpose()?;
    let mut rows = Vec::new();
    for path in &files {
        let f = TensorFile::read(path)?;
        let frames = f.require("frames")?.to_array_of()?;
        let audio = AudioEmbedding::new(f.require("audio")?.to_array_of()?)?;
        let (_, _, h, w) = frames.dim();
        if masks.is_none() {
            masks = Some(make_default_masks(h, w)?);
        }
        let report = evaluate(
            &frames,
            masks.as_ref().expect("set above"),
            &audio_energy(&audio),
            max_lag,
        )
        .with_context(|| path.display().to_string())?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        rows.push(EvalRow::new(id, f.meta("adapter").unwrap_or("data"), &report));
    }
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(file, &rows)?;
    println!("scored {} clips", rows.len());
    Ok(())
}

fn bench(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = bench_cfg(config)?;
    let report = compare(AdapterKind::Semi, AdapterKind::Fully, &cfg)?;
    let mut file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    writeln!(file, "{}", report.to_json())?;
    print!("{}", report.table());
    Ok(())
}
