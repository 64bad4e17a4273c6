//! End-to-end glue: dataset → training pool → trained denoiser → sampled
//! clips → metrics. Shared by the CLI and the acceptance runner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::RegionMasks;
use crate::audio::{AudioEmbedding, FeaturizerCfg};
use crate::config::RunConfig;
use crate::diffusion::{latent_to_pixels, pixels_to_latent, sample, DenoiserParams, NoiseSchedule, TrainExample};
use crate::faces::{frames_to_array, VideoSample};
use crate::metrics::{evaluate, MetricsReport};
use crate::{Error, Result};

/// Fresh denoiser parameters drawn from the run's seed.
pub fn init_params(cfg: &RunConfig) -> Result<DenoiserParams> {
    DenoiserParams::init(cfg.denoiser_cfg(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// One training example per frame, conditioned on its audio context window.
pub fn training_pool(samples: &[VideoSample], context_radius: usize) -> Vec<TrainExample> {
    samples
        .iter()
        .flat_map(|s| {
            (0..s.len()).map(move |t| TrainExample {
                z0: pixels_to_latent(&s.frame(t)),
                audio: s.audio.context_window(t, context_radius),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOpts {
    pub steps: usize,
    pub seed: u64,
    pub context_radius: usize,
}

/// Samples a clip for `audio` and returns it as pixel frames `[N × C × H × W]`.
pub fn sample_clip(
    audio: &AudioEmbedding,
    masks: &RegionMasks,
    p: &DenoiserParams,
    s: &NoiseSchedule,
    opts: SampleOpts,
) -> Result<ndarray::Array4<f64>> {
    let latents = sample(audio, masks, p, s, opts.steps, opts.seed, opts.context_radius)?;
    let pixels: Vec<_> = latents.iter().map(latent_to_pixels).collect();
    frames_to_array(&pixels)
}

/// Per-frame audio energy used as the sync reference.
pub fn audio_energy(audio: &AudioEmbedding) -> Vec<f64> {
    audio.energies(FeaturizerCfg::default().energy_floor)
}

/// Samples a clip for each held-out sample's audio and scores it.
pub fn evaluate_samples(
    samples: &[VideoSample],
    masks: &RegionMasks,
    p: &DenoiserParams,
    s: &NoiseSchedule,
    opts: SampleOpts,
    max_lag: usize,
) -> Result<Vec<MetricsReport>> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no clips to evaluate".into()));
    }
    samples
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let frames = sample_clip(
                &clip.audio,
                masks,
                p,
                s,
                SampleOpts {
                    seed: opts.seed.wrapping_add(i as u64),
                    ..opts
                },
            )?;
            evaluate(&frames, masks, &audio_energy(&clip.audio), max_lag)
        })
        .collect()
}

/// Mean of a metric over reports.
pub fn mean_of(reports: &[MetricsReport], f: impl Fn(&MetricsReport) -> f64) -> f64 {
    reports.iter().map(f).sum::<f64>() / reports.len() as f64
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
