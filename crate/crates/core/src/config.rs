//! Run configuration (TOML), content digests and checkpoint I/O.
//!
//! Every artifact written by a run carries the digest of the frozen config
//! that produced it, so outputs can be traced back to their settings.

use std::path::Path;

use rand::SeedableRng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterKind;
use crate::audio::FeaturizerCfg;
use crate::diffusion::{make_schedule, DenoiserCfg, DenoiserParams, NoiseSchedule, TrainCfg};
use crate::faces::SceneCfg;
use crate::params::Parameters;
use crate::tensor_file::TensorFile;
use crate::{Error, Result};

/// Environment variable that overrides the top-level `seed`.
pub const SEED_ENV: &str = "SDTALK_SEED";

/// First 16 hex characters of the SHA-256 of `text`.
pub fn digest_str(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Digest of a value's canonical JSON form.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config types serialize to JSON");
    digest_str(&json)
}

pub fn load_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub zero_conv_kernel: usize,
    pub time_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserCfg::default();
        Self {
            channels: d.channels,
            attn_dim: d.attn_dim,
            heads: d.heads,
            blocks: d.blocks,
            zero_conv_kernel: d.zero_conv_kernel,
            time_dim: d.time_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Loss CSV row every this many steps.
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainCfg::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            steps: t.steps,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub samples: usize,
    pub seed: u64,
    pub scene: SceneCfg,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples: 200,
            seed: 1000,
            scene: SceneCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub steps: usize,
    /// Audio tokens on each side of a frame that condition it.
    pub context_radius: usize,
    pub max_lag: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            steps: 40,
            context_radius: 2,
            max_lag: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub adapter: AdapterKind,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub sample: SampleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            adapter: AdapterKind::Semi,
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            sample: SampleSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = load_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `SDTALK_SEED` if it is set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(self)
    }

    pub fn denoiser_cfg(&self) -> DenoiserCfg {
        let m = self.model;
        DenoiserCfg {
            kind: self.adapter,
            latent_channels: 1,
            channels: m.channels,
            attn_dim: m.attn_dim,
            heads: m.heads,
            audio_dim: FeaturizerCfg::default().feature_dim(),
            blocks: m.blocks,
            zero_conv_kernel: m.zero_conv_kernel,
            time_dim: m.time_dim,
        }
    }

    pub fn train_cfg(&self) -> TrainCfg {
        TrainCfg {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            seed: self.seed,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = self.schedule;
        make_schedule(s.steps, s.beta_start, s.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser_cfg().validate()?;
        self.train_cfg().validate()?;
        self.data.scene.validate()?;
        self.noise_schedule()?;
        if self.train.log_every == 0 {
            return Err(Error::InvalidConfig("train.log_every must be positive".into()));
        }
        if self.data.samples == 0 {
            return Err(Error::InvalidConfig("data.samples must be positive".into()));
        }
        if self.sample.steps == 0 || self.sample.steps > self.schedule.steps {
            return Err(Error::InvalidConfig(format!(
                "sample.steps must be in 1..={}",
                self.schedule.steps
            )));
        }
        Ok(())
    }

    /// The validated config, serialized back to TOML, with its digest.
    pub fn freeze(&self) -> Result<(String, String)> {
        self.validate()?;
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        Ok((text, digest(self)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config_digest: String,
    pub steps: usize,
}

pub fn checkpoint_to_tensor_file(p: &DenoiserParams, meta: &CheckpointMeta) -> Result<TensorFile> {
    let mut f = TensorFile::new();
    let model = serde_json::to_string(&p.cfg).map_err(|e| Error::Format(e.to_string()))?;
    f.set_meta("model", &model)?;
    f.set_meta("config_digest", &meta.config_digest)?;
    f.set_meta("steps", &meta.steps.to_string())?;
    p.write_tensors(&mut f)?;
    Ok(f)
}

pub fn checkpoint_from_tensor_file(f: &TensorFile) -> Result<(DenoiserParams, CheckpointMeta)> {
    let need = |key: &str| {
        f.meta(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))
    };
    let cfg: DenoiserCfg = serde_json::from_str(need("model")?).map_err(|e| Error::Format(e.to_string()))?;
    cfg.validate()?;
    let meta = CheckpointMeta {
        config_digest: need("config_digest")?.to_owned(),
        steps: need("steps")?
            .parse()
            .map_err(|_| Error::Format("checkpoint `steps` is not an integer".into()))?,
    };
    let mut p = DenoiserParams::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    p.read_tensors(f)?;
    Ok((p, meta))
}

pub fn save_checkpoint(path: impl AsRef<Path>, p: &DenoiserParams, meta: &CheckpointMeta) -> Result<()> {
    checkpoint_to_tensor_file(p, meta)?.write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DenoiserParams, CheckpointMeta)> {
    checkpoint_from_tensor_file(&TensorFile::read(path)?)
}
