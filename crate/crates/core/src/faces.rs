//! Sprite-face clips with known driving signals.
//!
//! Each clip has three independent drivers per frame:
//!
//! - lip energy `e_t ∈ [0, 1]`: a slow seeded oscillation plus jitter; it sets
//!   both the audio amplitude and the mouth opening,
//! - expression level `x_t = λ·x_{t−1} + (1 − λ)·e_t`: a low-passed copy of
//!   the energy that sets eye brightness,
//! - pose offset `o_t = A·sin(2πt/P)`: horizontal head sway, independent of
//!   the audio.
//!
//! The mouth sits on a static plate covering the lip region, with its height
//! rendered with exact fractional row coverage, so the mean lip-region
//! intensity is an affine function of `e_t`.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{make_default_masks, RegionMasks};
use crate::attention::Latent;
use crate::audio::{embed_audio, synth_audio, AudioEmbedding, FeaturizerCfg, SynthSpec};
use crate::config::digest;
use crate::tensor_file::{DType, TensorFile};
use crate::{Error, Result};

/// Peak tone amplitude at `e_t = 1`; energy is `TONE_PEAK² · e_t / 2`.
pub const TONE_PEAK: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneCfg {
    pub frames: usize,
    pub size: usize,
    pub background_contrast: f64,
    /// Extra mouth height in pixel rows per unit of lip energy.
    pub lip_gain: f64,
    pub lip_min_height: f64,
    /// Expression low-pass coefficient λ.
    pub exp_lambda: f64,
    pub exp_init: f64,
    pub pose_amplitude: f64,
    pub pose_period: f64,
    /// Multiplies the lip-energy driver; 0 gives a silent clip.
    pub audio_level: f64,
}

impl Default for SceneCfg {
    fn default() -> Self {
        Self {
            frames: 16,
            size: 32,
            background_contrast: 0.3,
            lip_gain: 5.0,
            lip_min_height: 0.5,
            exp_lambda: 0.6,
            exp_init: 0.5,
            pose_amplitude: 3.0,
            pose_period: 16.0,
            audio_level: 1.0,
        }
    }
}

impl SceneCfg {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidConfig("frames must be positive".into()));
        }
        if self.size < 16 {
            return Err(Error::InvalidConfig("frame size must be at least 16".into()));
        }
        let gains = [
            ("background_contrast", self.background_contrast),
            ("lip_gain", self.lip_gain),
            ("lip_min_height", self.lip_min_height),
            ("pose_amplitude", self.pose_amplitude),
            ("audio_level", self.audio_level),
        ];
        if let Some((name, _)) = gains.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!("{name} must be a finite value ≥ 0")));
        }
        if !(0.0..1.0).contains(&self.exp_lambda) {
            return Err(Error::InvalidConfig("exp_lambda must be in [0, 1)".into()));
        }
        if !(self.pose_period > 0.0) {
            return Err(Error::InvalidConfig("pose_period must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.exp_init) {
            return Err(Error::InvalidConfig("exp_init must be in [0, 1]".into()));
        }
        if self.audio_level > 1.0 {
            return Err(Error::InvalidConfig("audio_level must be at most 1".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drivers {
    pub lip_energy: Vec<f64>,
    pub exp_level: Vec<f64>,
    pub pose_offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub seed: u64,
    /// `[N × C × H × W]`, pixels in `[0, 1]`.
    pub frames: Array4<f64>,
    pub audio: AudioEmbedding,
    pub drivers: Drivers,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, t: usize) -> Latent {
        Latent {
            data: self.frames.index_axis(Axis(0), t).to_owned(),
        }
    }

    pub fn to_tensor_file(&self, cfg_digest: &str) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        f.set_meta("seed", &self.seed.to_string())?;
        f.set_meta("config_digest", cfg_digest)?;
        f.push_array("frames", &self.frames)?;
        f.push_array("audio", &self.audio.tokens)?;
        let n = self.drivers.lip_energy.len();
        f.push("lip_energy", &[n], self.drivers.lip_energy.clone(), DType::F64)?;
        f.push("exp_level", &[n], self.drivers.exp_level.clone(), DType::F64)?;
        f.push("pose_offset", &[n], self.drivers.pose_offset.clone(), DType::F64)?;
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let seed = f
            .meta("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("sample file has no seed".into()))?;
        let frames: Array4<f64> = f.require("frames")?.to_array_of()?;
        let audio = AudioEmbedding::new(f.require("audio")?.to_array_of()?)?;
        let drivers = Drivers {
            lip_energy: f.require("lip_energy")?.data.clone(),
            exp_level: f.require("exp_level")?.data.clone(),
            pose_offset: f.require("pose_offset")?.data.clone(),
        };
        let n = frames.dim().0;
        if audio.len() != n
            || [&drivers.lip_energy, &drivers.exp_level, &drivers.pose_offset]
                .iter()
                .any(|d| d.len() != n)
        {
            return Err(Error::Shape("frame, audio and driver counts differ".into()));
        }
        Ok(Self {
            seed,
            frames,
            audio,
            drivers,
        })
    }
}

pub fn pose_offsets(cfg: &SceneCfg) -> Vec<f64> {
    (0..cfg.frames)
        .map(|t| cfg.pose_amplitude * (std::f64::consts::TAU * t as f64 / cfg.pose_period).sin())
        .collect()
}

fn lip_energies(cfg: &SceneCfg, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let period = rng.random_range(5.0..12.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..cfg.frames)
        .map(|t| {
            let slow = 0.5 + 0.45 * (std::f64::consts::TAU * t as f64 / period + phase).sin();
            let jitter = 0.05 * rng.random_range(-1.0..1.0);
            cfg.audio_level * (slow + jitter).clamp(0.0, 1.0)
        })
        .collect()
}

/// Overlap of `[a0, a1)` with `[b0, b1)`.
fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

const SUPERSAMPLE: usize = 4;

/// Fraction of pixel `(y, x)` inside `inside(py, px)`, by 4×4 supersampling.
fn coverage(y: usize, x: usize, inside: impl Fn(f64, f64) -> bool) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            if inside(py, px) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

const FACE_VALUE: f64 = 0.8;
const PLATE_VALUE: f64 = 0.35;
const MOUTH_VALUE: f64 = 0.95;

struct Background {
    cell: usize,
    offset_y: usize,
    offset_x: usize,
}

fn render_frame(
    cfg: &SceneCfg,
    masks: &RegionMasks,
    bg: &Background,
    lip_energy: f64,
    exp_level: f64,
    pose: f64,
) -> Array2<f64> {
    let n = cfg.size;
    let s = n as f64;
    let lo = 0.5 - cfg.background_contrast / 2.0;
    let hi = 0.5 + cfg.background_contrast / 2.0;
    let (cx, cy, radius) = (s / 2.0 + pose, s * 0.45, s * 0.375);

    // Eyes: two boxes in the upper face, following the head.
    let eye_rows = (s * 0.28, s * 0.38);
    let eye_w = s * 0.1;
    let eyes = [cx - s * 0.19, cx + s * 0.09];
    let eye_value = 0.1 + 0.8 * exp_level;

    // Mouth: centred in the lip region, fixed columns.
    let (lip_r0, lip_r1) = region_rows(&masks.lip);
    let mouth_center = (lip_r0 + lip_r1) as f64 / 2.0;
    let mouth_h = cfg.lip_min_height + cfg.lip_gain * lip_energy;
    let mouth_cols = (n * 13 / 32, n * 19 / 32);

    Array2::from_shape_fn((n, n), |(y, x)| {
        if masks.lip[[y, x]] > 0.0 {
            let in_cols = (mouth_cols.0..mouth_cols.1).contains(&x);
            let cov = if in_cols {
                overlap(
                    y as f64,
                    y as f64 + 1.0,
                    mouth_center - mouth_h / 2.0,
                    mouth_center + mouth_h / 2.0,
                )
            } else {
                0.0
            };
            return (PLATE_VALUE + (MOUTH_VALUE - PLATE_VALUE) * cov).clamp(0.0, 1.0);
        }
        let checker = ((y + bg.offset_y) / bg.cell + (x + bg.offset_x) / bg.cell) % 2 == 0;
        let background = if checker { hi } else { lo };
        let face = coverage(y, x, |py, px| (py - cy).powi(2) + (px - cx).powi(2) <= radius * radius);
        let mut v = background + (FACE_VALUE - background) * face;
        let eye = coverage(y, x, |py, px| {
            py >= eye_rows.0 && py < eye_rows.1 && eyes.iter().any(|&e0| px >= e0 && px < e0 + eye_w)
        });
        v += (eye_value - v) * eye;
        v.clamp(0.0, 1.0)
    })
}

fn region_rows(m: &Array2<f64>) -> (usize, usize) {
    let rows: Vec<usize> = m
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&v| v > 0.0))
        .map(|(i, _)| i)
        .collect();
    (rows[0], rows[rows.len() - 1] + 1)
}

pub fn gen_video_sample(seed: u64, cfg: &SceneCfg) -> Result<VideoSample> {
    cfg.validate()?;
    let masks = make_default_masks(cfg.size, cfg.size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = {
        let cell = [2usize, 4, 8][rng.random_range(0..3)];
        Background {
            cell,
            offset_y: rng.random_range(0..cell),
            offset_x: rng.random_range(0..cell),
        }
    };
    let lip_energy = lip_energies(cfg, &mut rng);
    let exp_level: Vec<f64> = lip_energy
        .iter()
        .scan(cfg.exp_init, |x, &e| {
            *x = cfg.exp_lambda * *x + (1.0 - cfg.exp_lambda) * e;
            Some(*x)
        })
        .collect();
    let pose_offset = pose_offsets(cfg);

    let featurizer = FeaturizerCfg::default();
    let tone_bin = rng.random_range(0..featurizer.dft_bins);
    let freq = featurizer.bin_frequency(tone_bin, crate::audio::DEFAULT_SAMPLE_RATE);
    let amplitudes: Vec<f64> = lip_energy.iter().map(|e| TONE_PEAK * e.sqrt()).collect();
    let clip = synth_audio(&SynthSpec::frame_envelope(freq, &amplitudes), rng.random())?;
    let audio = embed_audio(&clip, &featurizer)?;

    let mut frames = Array4::zeros((cfg.frames, 1, cfg.size, cfg.size));
    for t in 0..cfg.frames {
        let img = render_frame(cfg, &masks, &bg, lip_energy[t], exp_level[t], pose_offset[t]);
        frames
            .index_axis_mut(Axis(0), t)
            .index_axis_mut(Axis(0), 0)
            .assign(&img);
    }
    Ok(VideoSample {
        seed,
        frames,
        audio,
        drivers: Drivers {
            lip_energy,
            exp_level,
            pose_offset,
        },
    })
}

pub fn make_dataset(n: usize, seed: u64, cfg: &SceneCfg) -> Result<Vec<VideoSample>> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one sample".into()));
    }
    (0..n as u64).map(|i| gen_video_sample(seed + i, cfg)).collect()
}

pub const MANIFEST: &str = "manifest.txt";

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:05}.sdtf")
}

/// Writes one tensor file per sample plus `manifest.txt`. Returns the
/// manifest digest.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[VideoSample], seed: u64, cfg: &SceneCfg) -> Result<String> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_digest = cfg.digest();
    let mut manifest = format!(
        "samples = {}\nseed = {seed}\nconfig_digest = {cfg_digest}\nscene = {}\n",
        samples.len(),
        serde_json::to_string(cfg).expect("scene config serializes")
    );
    for (i, s) in samples.iter().enumerate() {
        let name = sample_file_name(i);
        s.to_tensor_file(&cfg_digest)?.write(dir.join(&name))?;
        manifest.push_str(&format!("file = {name} seed={}\n", s.seed));
    }
    let manifest_digest = crate::config::digest_str(&manifest);
    let path = dir.join(MANIFEST);
    std::fs::write(&path, &manifest).map_err(|e| Error::io(&path, e))?;
    Ok(manifest_digest)
}

/// Reads every `sample_*.sdtf` in `dir`, in file-name order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<VideoSample>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("sample_") && n.ends_with(".sdtf"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!("no samples in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| VideoSample::from_tensor_file(&TensorFile::read(p)?))
        .collect()
}

/// Mean intensity inside the lip mask, per frame.
pub fn lip_intensity(frames: &Array4<f64>, masks: &RegionMasks) -> Vec<f64> {
    let total = masks.lip.sum();
    frames
        .axis_iter(Axis(0))
        .map(|f| {
            let img = f.index_axis(Axis(0), 0);
            (&img * &masks.lip).sum() / total
        })
        .collect()
}

pub fn frames_to_array(frames: &[Latent]) -> Result<Array4<f64>> {
    let first = frames.first().ok_or_else(|| Error::Shape("no frames".into()))?;
    let (c, h, w) = first.shape();
    let mut out = Array4::zeros((frames.len(), c, h, w));
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != (c, h, w) {
            return Err(Error::Shape("frames differ in shape".into()));
        }
        out.index_axis_mut(Axis(0), i).assign(&f.data);
    }
    Ok(out)
}

pub fn array_to_frames(frames: &Array4<f64>) -> Vec<Latent> {
    frames
        .axis_iter(Axis(0))
        .map(|f| Latent {
            data: Array3::from(f.to_owned()),
        })
        .collect()
}
