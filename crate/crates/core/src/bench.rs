//! Analytic MAC accounting and wall-clock timing of the two adapter kinds.
//!
//! All counts are multiply-accumulates (MACs), not FLOPs; one MAC is one
//! multiply plus one add. Timing covers a full denoiser forward pass.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{make_default_masks, AdapterKind, RegionMasks};
use crate::attention::Latent;
use crate::audio::AudioEmbedding;
use crate::config::digest;
use crate::diffusion::{denoiser_forward, DenoiserCfg, DenoiserParams};
use crate::params::Parameters;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchCfg {
    /// Latent channels C inside the denoiser.
    pub channels: usize,
    pub attn_dim: usize,
    pub audio_dim: usize,
    pub audio_tokens: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub runs: usize,
    pub warmup: usize,
    pub single_thread: bool,
}

impl Default for BenchCfg {
    fn default() -> Self {
        Self::desk()
    }
}

impl BenchCfg {
    /// The hand-checkable accounting example.
    pub fn small() -> Self {
        Self {
            channels: 8,
            attn_dim: 16,
            audio_dim: 16,
            audio_tokens: 4,
            height: 4,
            width: 4,
            heads: 4,
            ..Self::desk()
        }
    }

    pub fn medium() -> Self {
        Self {
            channels: 32,
            attn_dim: 64,
            height: 16,
            width: 16,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: 64,
            attn_dim: 128,
            audio_dim: 10,
            audio_tokens: 16,
            height: 32,
            width: 32,
            heads: 4,
            blocks: 3,
            kernel: 1,
            runs: 50,
            warmup: 10,
            single_thread: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("channels", self.channels),
            ("attn_dim", self.attn_dim),
            ("audio_dim", self.audio_dim),
            ("audio_tokens", self.audio_tokens),
            ("height", self.height),
            ("width", self.width),
            ("heads", self.heads),
            ("blocks", self.blocks),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.attn_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "attn_dim {} not divisible by heads {}",
                self.attn_dim, self.heads
            )));
        }
        if self.kernel != 1 && self.kernel != 3 {
            return Err(Error::InvalidConfig("kernel must be 1 or 3".into()));
        }
        Ok(())
    }

    fn denoiser_cfg(&self, kind: AdapterKind) -> DenoiserCfg {
        DenoiserCfg {
            kind,
            latent_channels: 1,
            channels: self.channels,
            attn_dim: self.attn_dim,
            heads: self.heads,
            audio_dim: self.audio_dim,
            blocks: self.blocks,
            zero_conv_kernel: self.kernel,
            ..DenoiserCfg::default()
        }
    }

    pub fn digest(&self) -> String {
        digest(self)
    }
}

/// MACs of one cross-attention evaluation, by operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionMacs {
    pub q_proj: u64,
    pub k_proj: u64,
    pub v_proj: u64,
    pub scores: u64,
    pub weighted_sum: u64,
    pub out_proj: u64,
}

impl AttentionMacs {
    pub fn total(&self) -> u64 {
        self.q_proj + self.k_proj + self.v_proj + self.scores + self.weighted_sum + self.out_proj
    }

    fn scaled(&self, n: u64) -> Self {
        Self {
            q_proj: n * self.q_proj,
            k_proj: n * self.k_proj,
            v_proj: n * self.v_proj,
            scores: n * self.scores,
            weighted_sum: n * self.weighted_sum,
            out_proj: n * self.out_proj,
        }
    }
}

/// Per-call adapter MACs for one kind, with both kinds' totals alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopReport {
    pub unit: &'static str,
    pub kind: AdapterKind,
    /// Summed over this kind's attention evaluations.
    pub q_proj: u64,
    pub k_proj: u64,
    pub v_proj: u64,
    pub scores: u64,
    pub weighted_sum: u64,
    pub out_proj: u64,
    pub zero_convs: u64,
    pub total: u64,
    /// One attention evaluation.
    pub attention: u64,
    pub semi_total: u64,
    pub fully_total: u64,
    /// `fully_total / semi_total`.
    pub ratio: f64,
}

pub fn attention_macs(cfg: &BenchCfg) -> AttentionMacs {
    let hw = (cfg.height * cfg.width) as u64;
    let (c, d, da, ta) = (
        cfg.channels as u64,
        cfg.attn_dim as u64,
        cfg.audio_dim as u64,
        cfg.audio_tokens as u64,
    );
    AttentionMacs {
        q_proj: hw * c * d,
        k_proj: ta * da * d,
        v_proj: ta * da * d,
        scores: hw * ta * d,
        weighted_sum: hw * ta * d,
        out_proj: hw * d * c,
    }
}

/// Three region convolutions of `C → C` with a `k × k` kernel.
pub fn zero_conv_macs(cfg: &BenchCfg) -> u64 {
    let hw = (cfg.height * cfg.width) as u64;
    let c = cfg.channels as u64;
    let k = cfg.kernel as u64;
    3 * hw * c * c * k * k
}

pub fn count_flops(cfg: &BenchCfg, kind: AdapterKind) -> Result<FlopReport> {
    cfg.validate()?;
    let one = attention_macs(cfg);
    let attention = one.total();
    let convs = zero_conv_macs(cfg);
    let semi_total = attention + convs;
    let fully_total = 3 * attention;
    let parts = one.scaled(kind.attention_evaluations());
    let zero_convs = match kind {
        AdapterKind::Semi => convs,
        AdapterKind::Fully => 0,
    };
    Ok(FlopReport {
        unit: "MAC",
        kind,
        q_proj: parts.q_proj,
        k_proj: parts.k_proj,
        v_proj: parts.v_proj,
        scores: parts.scores,
        weighted_sum: parts.weighted_sum,
        out_proj: parts.out_proj,
        zero_convs,
        total: parts.total() + zero_convs,
        attention,
        semi_total,
        fully_total,
        ratio: fully_total as f64 / semi_total as f64,
    })
}

pub fn flops_table(cfg: &BenchCfg) -> Result<String> {
    let semi = count_flops(cfg, AdapterKind::Semi)?;
    let fully = count_flops(cfg, AdapterKind::Fully)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "adapter MACs per call  C={} D={} D_a={} T_a={} H={} W={} heads={} k={}",
        cfg.channels, cfg.attn_dim, cfg.audio_dim, cfg.audio_tokens, cfg.height, cfg.width, cfg.heads, cfg.kernel
    );
    let _ = writeln!(out, "{:<14}{:>14}{:>14}", "op", "semi", "fully");
    let rows = [
        ("q_proj", semi.q_proj, fully.q_proj),
        ("k_proj", semi.k_proj, fully.k_proj),
        ("v_proj", semi.v_proj, fully.v_proj),
        ("scores", semi.scores, fully.scores),
        ("weighted_sum", semi.weighted_sum, fully.weighted_sum),
        ("out_proj", semi.out_proj, fully.out_proj),
        ("zero_convs", semi.zero_convs, fully.zero_convs),
        ("total", semi.total, fully.total),
    ];
    for (name, a, b) in rows {
        let _ = writeln!(out, "{name:<14}{a:>14}{b:>14}");
    }
    let _ = writeln!(out, "ratio fully/semi = {:.4}", semi.ratio);
    Ok(out)
}

/// Parameter count and a rough peak-activation size for one adapter call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryEstimate {
    pub adapter_params: u64,
    pub denoiser_params: u64,
    /// f64 values live at once inside the adapter's forward pass.
    pub activation_values: u64,
    pub activation_bytes: u64,
}

pub fn memory_estimate(cfg: &BenchCfg, kind: AdapterKind) -> Result<MemoryEstimate> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = DenoiserParams::init(cfg.denoiser_cfg(kind), &mut rng)?;
    let adapter_params = p.blocks[0].adapter.num_params() as u64;
    let hw = (cfg.height * cfg.width) as u64;
    let (c, d, ta) = (cfg.channels as u64, cfg.attn_dim as u64, cfg.audio_tokens as u64);
    let heads = cfg.heads as u64;
    // q, o (HW×D), probabilities (heads×HW×T_a) and the attention output (HW×C)
    // per evaluation; semi adds the masked map and conv output.
    let per_attention = 2 * hw * d + heads * hw * ta + hw * c;
    let activation_values = match kind {
        AdapterKind::Semi => per_attention + 2 * hw * c,
        AdapterKind::Fully => 3 * per_attention + hw * c,
    };
    Ok(MemoryEstimate {
        adapter_params,
        denoiser_params: p.num_params() as u64,
        activation_values,
        activation_bytes: 8 * activation_values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub median_ns: u64,
    pub p10_ns: u64,
    pub p90_ns: u64,
    pub runs: usize,
    pub config_digest: String,
    pub single_thread: bool,
    /// Set when timings are not from single-threaded mode.
    pub indicative_only: bool,
}

/// Smallest observable nonzero step of the monotonic clock.
pub fn clock_granularity() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..16 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Nearest-rank quantile of sorted samples.
fn quantile(sorted: &[u64], q: f64) -> u64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

pub fn summarize(mut samples: Vec<u64>, cfg: &BenchCfg) -> TimingReport {
    samples.sort_unstable();
    TimingReport {
        median_ns: quantile(&samples, 0.5),
        p10_ns: quantile(&samples, 0.1),
        p90_ns: quantile(&samples, 0.9),
        runs: samples.len(),
        config_digest: cfg.digest(),
        single_thread: cfg.single_thread,
        indicative_only: !cfg.single_thread,
    }
}

/// Times `cfg.runs` full denoiser forward passes after `cfg.warmup` untimed ones.
pub fn time_inference(cfg: &BenchCfg, kind: AdapterKind) -> Result<TimingReport> {
    cfg.validate()?;
    if cfg.runs < 30 {
        return Err(Error::InvalidConfig(format!(
            "runs must be at least 30, got {}",
            cfg.runs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c);
    let mut p = DenoiserParams::init(cfg.denoiser_cfg(kind), &mut rng)?;
    // Trained-looking weights: the zero-initialized parts would otherwise be
    // exactly zero, which does not change the arithmetic but is unrepresentative.
    let flat: Vec<f64> = (0..p.num_params()).map(|_| rng.random_range(-0.1..0.1)).collect();
    p.load_flat(&flat)?;
    // Mask values do not change the arithmetic; grids too small for the
    // default layout use all-ones masks.
    let masks = make_default_masks(cfg.height, cfg.width).or_else(|_| {
        let ones = Array2::ones((cfg.height, cfg.width));
        RegionMasks::new(ones.clone(), ones.clone(), ones)
    })?;
    let audio = AudioEmbedding::new(Array2::from_shape_simple_fn((cfg.audio_tokens, cfg.audio_dim), || {
        rng.random_range(-1.0..1.0)
    }))?;
    let z = Latent::new(Array3::from_shape_simple_fn((1, cfg.height, cfg.width), || {
        rng.random_range(-1.0..1.0)
    }))?;

    for _ in 0..cfg.warmup {
        std::hint::black_box(denoiser_forward(&z, 50, &audio, &masks, &p)?);
    }
    let mut samples = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        let start = Instant::now();
        let out = denoiser_forward(std::hint::black_box(&z), 50, &audio, &masks, &p)?;
        samples.push(start.elapsed().as_nanos() as u64);
        std::hint::black_box(out);
    }
    let report = summarize(samples, cfg);
    check_timer_resolution(report.median_ns, clock_granularity().as_nanos() as u64)?;
    Ok(report)
}

/// Rejects timings shorter than 100 clock ticks.
pub fn check_timer_resolution(median_ns: u64, granularity_ns: u64) -> Result<()> {
    if median_ns < 100 * granularity_ns {
        return Err(Error::TimerResolution(format!(
            "median {median_ns} ns is under 100× the clock granularity ({granularity_ns} ns); use a larger config"
        )));
    }
    Ok(())
}

/// One kind's entry in the bench JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindResult {
    pub config: BenchCfg,
    pub kind: AdapterKind,
    pub flops: FlopReport,
    pub timing: TimingReport,
    pub memory: MemoryEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub a: KindResult,
    pub b: KindResult,
    /// `(median_b − median_a) / median_b`.
    pub improvement: f64,
    /// `total_b / total_a` in MACs.
    pub flop_ratio: f64,
}

pub fn kind_result(cfg: &BenchCfg, kind: AdapterKind) -> Result<KindResult> {
    Ok(KindResult {
        config: *cfg,
        kind,
        flops: count_flops(cfg, kind)?,
        timing: time_inference(cfg, kind)?,
        memory: memory_estimate(cfg, kind)?,
    })
}

pub fn compare_results(a: KindResult, b: KindResult) -> CompareReport {
    let (ma, mb) = (a.timing.median_ns as f64, b.timing.median_ns as f64);
    CompareReport {
        improvement: (mb - ma) / mb,
        flop_ratio: b.flops.total as f64 / a.flops.total as f64,
        a,
        b,
    }
}

pub fn compare(kind_a: AdapterKind, kind_b: AdapterKind, cfg: &BenchCfg) -> Result<CompareReport> {
    let a = kind_result(cfg, kind_a)?;
    let b = kind_result(cfg, kind_b)?;
    Ok(compare_results(a, b))
}

impl CompareReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let note = if self.a.timing.indicative_only {
            "  (multi-threaded: indicative only)"
        } else {
            ""
        };
        let _ = writeln!(out, "config {}{note}", self.a.timing.config_digest);
        let _ = writeln!(
            out,
            "{:<8}{:>14}{:>14}{:>14}{:>14}{:>12}",
            "kind", "MACs", "median ns", "p10 ns", "p90 ns", "params"
        );
        for r in [&self.a, &self.b] {
            let _ = writeln!(
                out,
                "{:<8}{:>14}{:>14}{:>14}{:>14}{:>12}",
                r.kind.as_str(),
                r.flops.total,
                r.timing.median_ns,
                r.timing.p10_ns,
                r.timing.p90_ns,
                r.memory.adapter_params
            );
        }
        let _ = writeln!(
            out,
            "time improvement {} vs {}: {:.1}%   MAC ratio {}/{}: {:.4}",
            self.a.kind,
            self.b.kind,
            100.0 * self.improvement,
            self.b.kind,
            self.a.kind,
            self.flop_ratio
        );
        out
    }
}
