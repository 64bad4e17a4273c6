//! Synthetic audio and the per-frame audio featurizer.
//!
//! Each video frame gets one token:
//! `[log(energy + floor), |DFT| at `dft_bins` fixed bins, Δ log-energy]`.
//! Energy is the mean square of the frame's window, so a sine of amplitude
//! `a` spanning whole periods has energy `a²/2`.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::tensor_file::{DType, TensorFile};
use crate::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FPS: u32 = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub frames_per_second: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, frames_per_second: u32) -> Result<Self> {
        if sample_rate == 0 || frames_per_second == 0 {
            return Err(Error::InvalidConfig(
                "sample rate and frame rate must be positive".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            frames_per_second,
        })
    }

    pub fn window(&self) -> usize {
        (self.sample_rate / self.frames_per_second) as usize
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono 16-bit PCM WAV file. No resampling is performed.
    pub fn read_wav(path: impl AsRef<Path>, frames_per_second: u32) -> Result<Self> {
        let path = path.as_ref();
        let mut reader =
            hound::WavReader::open(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::InvalidConfig(format!(
                "{}: expected mono 16-bit PCM, got {} ch / {} bit",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::new(samples, spec.sample_rate, frames_per_second)
    }
}

/// One constant-amplitude tone segment. Amplitude 0 gives silence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneSegment {
    pub duration_s: f64,
    pub freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub frames_per_second: u32,
    pub segments: Vec<ToneSegment>,
    /// Peak amplitude of seeded uniform noise added on top of the tones.
    pub noise: f64,
    /// Start each segment at a seeded random phase instead of phase 0.
    pub random_phase: bool,
}

impl SynthSpec {
    pub fn new(segments: Vec<ToneSegment>) -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            frames_per_second: DEFAULT_FPS,
            segments,
            noise: 0.0,
            random_phase: false,
        }
    }

    pub fn silence(duration_s: f64) -> Self {
        Self::new(vec![ToneSegment {
            duration_s,
            freq_hz: 0.0,
            amplitude: 0.0,
        }])
    }

    pub fn tone(duration_s: f64, freq_hz: f64, amplitude: f64) -> Self {
        Self::new(vec![ToneSegment {
            duration_s,
            freq_hz,
            amplitude,
        }])
    }

    /// One segment per video frame with the given per-frame amplitudes.
    pub fn frame_envelope(freq_hz: f64, amplitudes: &[f64]) -> Self {
        let frame_s = 1.0 / DEFAULT_FPS as f64;
        Self::new(
            amplitudes
                .iter()
                .map(|&amplitude| ToneSegment {
                    duration_s: frame_s,
                    freq_hz,
                    amplitude,
                })
                .collect(),
        )
    }
}

pub fn synth_audio(spec: &SynthSpec, seed: u64) -> Result<AudioClip> {
    let nyquist = spec.sample_rate as f64 / 2.0;
    for (i, seg) in spec.segments.iter().enumerate() {
        if !(seg.duration_s > 0.0) {
            return Err(Error::InvalidConfig(format!("segment {i}: duration must be positive")));
        }
        if !(seg.freq_hz >= 0.0 && seg.freq_hz < nyquist) {
            return Err(Error::InvalidConfig(format!(
                "segment {i}: frequency {} Hz aliases at {} Hz sample rate",
                seg.freq_hz, spec.sample_rate
            )));
        }
        if !seg.amplitude.is_finite() {
            return Err(Error::InvalidConfig(format!("segment {i}: amplitude not finite")));
        }
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::InvalidConfig("noise amplitude must be non-negative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = spec.sample_rate as f64;
    let mut samples = Vec::new();
    // Phase is continuous across segments unless random_phase is set.
    let mut n_global = 0usize;
    for seg in &spec.segments {
        let n = (seg.duration_s * sr).round() as usize;
        let phase0 = if spec.random_phase {
            rng.random::<f64>() * std::f64::consts::TAU
        } else {
            0.0
        };
        for k in 0..n {
            let time = if spec.random_phase { k } else { n_global + k } as f64 / sr;
            let mut v = seg.amplitude * (std::f64::consts::TAU * seg.freq_hz * time + phase0).sin();
            if spec.noise > 0.0 {
                v += spec.noise * (2.0 * rng.random::<f64>() - 1.0);
            }
            samples.push(v.clamp(-1.0, 1.0));
        }
        n_global += n;
    }
    AudioClip::new(samples, spec.sample_rate, spec.frames_per_second)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturizerCfg {
    /// Samples per video frame.
    pub window: usize,
    pub dft_bins: usize,
    pub energy_floor: f64,
}

impl FeaturizerCfg {
    pub fn for_rates(sample_rate: u32, frames_per_second: u32) -> Self {
        Self {
            window: (sample_rate / frames_per_second) as usize,
            dft_bins: 8,
            energy_floor: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dft_bins == 0 || self.window < 2 * self.dft_bins {
            return Err(Error::InvalidConfig(format!(
                "window {} must be at least 2 × dft_bins ({})",
                self.window, self.dft_bins
            )));
        }
        if !(self.energy_floor > 0.0) {
            return Err(Error::InvalidConfig("energy_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.dft_bins + 2
    }

    /// DFT index (within one window) of magnitude feature `k`.
    pub fn bin_index(&self, k: usize) -> usize {
        let stride = (self.window / (2 * (self.dft_bins + 1))).max(1);
        (k + 1) * stride
    }

    pub fn bin_frequency(&self, k: usize, sample_rate: u32) -> f64 {
        self.bin_index(k) as f64 * sample_rate as f64 / self.window as f64
    }
}

impl Default for FeaturizerCfg {
    fn default() -> Self {
        Self::for_rates(DEFAULT_SAMPLE_RATE, DEFAULT_FPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbedding {
    /// `[T_a × D_a]`, one row per audio frame.
    pub tokens: Array2<f64>,
}

impl AudioEmbedding {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::Shape(
                "audio embedding needs at least one token and feature".into(),
            ));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio embedding".into()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn token(&self, t: usize) -> ArrayView1<'_, f64> {
        self.tokens.row(t)
    }

    /// Tokens `frame - radius ..= frame + radius`, indices clamped to the clip.
    /// Always returns `2 * radius + 1` rows.
    pub fn context_window(&self, frame: usize, radius: usize) -> AudioEmbedding {
        let last = self.len() as isize - 1;
        let mut out = Array2::zeros((2 * radius + 1, self.dim()));
        for (row, offset) in (-(radius as isize)..=radius as isize).enumerate() {
            let src = (frame as isize + offset).clamp(0, last) as usize;
            out.row_mut(row).assign(&self.tokens.row(src));
        }
        AudioEmbedding { tokens: out }
    }

    /// Linear per-frame energy recovered from the log-energy feature.
    pub fn energies(&self, floor: f64) -> Vec<f64> {
        self.tokens
            .column(0)
            .iter()
            .map(|l| (l.exp() - floor).max(0.0))
            .collect()
    }
}

struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
}

pub fn embed_audio(clip: &AudioClip, cfg: &FeaturizerCfg) -> Result<AudioEmbedding> {
    cfg.validate()?;
    let frames = clip.samples.len() / cfg.window;
    if frames == 0 {
        return Err(Error::InvalidConfig(format!(
            "clip of {} samples is shorter than one {}-sample window",
            clip.samples.len(),
            cfg.window
        )));
    }
    let mut spec = Spectrum {
        fft: FftPlanner::new().plan_fft_forward(cfg.window),
        buf: vec![Complex::default(); cfg.window],
    };
    let dim = cfg.feature_dim();
    let mut tokens = Array2::zeros((frames, dim));
    let norm = 2.0 / cfg.window as f64;
    let mut prev_log = None;
    for t in 0..frames {
        let window = &clip.samples[t * cfg.window..(t + 1) * cfg.window];
        let energy = window.iter().map(|x| x * x).sum::<f64>() / cfg.window as f64;
        let log_e = (energy + cfg.energy_floor).ln();

        for (dst, &x) in spec.buf.iter_mut().zip(window) {
            *dst = Complex::new(x, 0.0);
        }
        spec.fft.process(&mut spec.buf);

        let mut row = tokens.row_mut(t);
        row[0] = log_e;
        for k in 0..cfg.dft_bins {
            row[1 + k] = spec.buf[cfg.bin_index(k)].norm() * norm;
        }
        row[dim - 1] = prev_log.map_or(0.0, |p| log_e - p);
        prev_log = Some(log_e);
    }
    AudioEmbedding::new(tokens)
}

const EMBEDDING_TENSOR: &str = "audio";

pub fn save_embedding(e: &AudioEmbedding, path: impl AsRef<Path>) -> Result<()> {
    let mut file = TensorFile::new();
    file.push(
        EMBEDDING_TENSOR,
        e.tokens.shape(),
        e.tokens.iter().copied().collect(),
        DType::F64,
    )?;
    file.write(path)
}

pub fn load_embedding(path: impl AsRef<Path>) -> Result<AudioEmbedding> {
    let file = TensorFile::read(path)?;
    let t = file.require(EMBEDDING_TENSOR)?;
    if t.dims.len() != 2 {
        return Err(Error::Shape(format!(
            "audio embedding must be rank 2, got {:?}",
            t.dims
        )));
    }
    AudioEmbedding::new(t.to_array_of()?)
}

/// Shifts a clip later in time by `windows` frames of silence.
pub fn delay_clip(clip: &AudioClip, windows: usize) -> AudioClip {
    let mut samples = vec![0.0; windows * clip.window()];
    samples.extend_from_slice(&clip.samples);
    AudioClip {
        samples,
        ..clip.clone()
    }
}
