//! Miniature DDPM training and DDIM sampling around a pointwise denoiser
//! whose audio conditioning is one adapter per block.
//!
//! Per block, on the `[H·W × C]` position matrix `h`:
//!
//! ```text
//! h ← h + W2·silu(W1·h + b1) + b2 + proj(sinusoidal(t))
//! h ← h + adapter(h, audio, masks)
//! ```
//!
//! followed by a final pointwise projection back to the latent channels.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    adapter_backward_from_cache, adapter_forward, AdapterCache, AdapterKind, AdapterParams, RegionMasks,
};
use crate::attention::{fill_uniform_fan_in, Latent};
use crate::audio::AudioEmbedding;
use crate::params::{join, Adam, Parameters};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// Linear betas from `beta_start` to `beta_end` over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidConfig(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alpha_bar = betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { betas, alpha_bar })
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps`
pub fn add_noise(z0: &Latent, t: usize, eps: &Latent, s: &NoiseSchedule) -> Result<Latent> {
    if t >= s.len() {
        return Err(Error::InvalidConfig(format!("timestep {t} outside 0..{}", s.len())));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!("z0 {:?} vs noise {:?}", z0.shape(), eps.shape())));
    }
    let (a, b) = noise_coeffs(s, t);
    Ok(Latent {
        data: &z0.data * a + &eps.data * b,
    })
}

fn noise_coeffs(s: &NoiseSchedule, t: usize) -> (f64, f64) {
    let ab = s.alpha_bar[t];
    (ab.sqrt(), (1.0 - ab).sqrt())
}

/// `[sin(t·f_0..f_{d/2}), cos(t·f_0..f_{d/2})]` with `f_i = 10000^(-i/(d/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserCfg {
    pub kind: AdapterKind,
    /// Latent channels in and out.
    pub latent_channels: usize,
    pub channels: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub audio_dim: usize,
    pub blocks: usize,
    pub zero_conv_kernel: usize,
    pub time_dim: usize,
}

impl Default for DenoiserCfg {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Semi,
            latent_channels: 1,
            channels: 16,
            attn_dim: 32,
            heads: 4,
            audio_dim: 10,
            blocks: 3,
            zero_conv_kernel: 1,
            time_dim: 16,
        }
    }
}

impl DenoiserCfg {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_channels", self.latent_channels),
            ("channels", self.channels),
            ("attn_dim", self.attn_dim),
            ("heads", self.heads),
            ("audio_dim", self.audio_dim),
            ("blocks", self.blocks),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.attn_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "attn_dim {} not divisible by heads {}",
                self.attn_dim, self.heads
            )));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::InvalidConfig("time_dim must be positive and even".into()));
        }
        if self.zero_conv_kernel != 1 && self.zero_conv_kernel != 3 {
            return Err(Error::InvalidConfig("zero_conv_kernel must be 1 or 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// `[time_dim × C]`
    pub w_t: Array2<f64>,
    pub b_t: Array1<f64>,
    pub adapter: AdapterParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub cfg: DenoiserCfg,
    pub in_w: Array2<f64>,
    pub in_b: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl DenoiserParams {
    /// Weights uniform in `±1/√fan_in`, biases zero, zero-convs zero, and a
    /// zero output projection so the untrained model predicts zero noise.
    pub fn init<R: Rng + ?Sized>(cfg: DenoiserCfg, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut matrix = |rows, cols| {
            let mut m = Array2::zeros((rows, cols));
            fill_uniform_fan_in(&mut m, rng);
            m
        };
        let in_w = matrix(cfg.latent_channels, c);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let w1 = matrix(c, c);
            let w2 = matrix(c, c);
            let w_t = matrix(cfg.time_dim, c);
            blocks.push((w1, w2, w_t));
        }
        let blocks = blocks
            .into_iter()
            .map(|(w1, w2, w_t)| {
                Ok(BlockParams {
                    w1,
                    b1: Array1::zeros(c),
                    w2,
                    b2: Array1::zeros(c),
                    w_t,
                    b_t: Array1::zeros(c),
                    adapter: AdapterParams::init(
                        cfg.kind,
                        c,
                        cfg.audio_dim,
                        cfg.attn_dim,
                        cfg.heads,
                        cfg.zero_conv_kernel,
                        rng,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            in_w,
            in_b: Array1::zeros(c),
            blocks,
            out_w: Array2::zeros((c, cfg.latent_channels)),
            out_b: Array1::zeros(cfg.latent_channels),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

impl Parameters for DenoiserParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "in_w"), self.in_w.view().into_dyn()));
        out.push((join(prefix, "in_b"), self.in_b.view().into_dyn()));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            out.push((join(&p, "w1"), b.w1.view().into_dyn()));
            out.push((join(&p, "b1"), b.b1.view().into_dyn()));
            out.push((join(&p, "w2"), b.w2.view().into_dyn()));
            out.push((join(&p, "b2"), b.b2.view().into_dyn()));
            out.push((join(&p, "w_t"), b.w_t.view().into_dyn()));
            out.push((join(&p, "b_t"), b.b_t.view().into_dyn()));
            b.adapter.visit(&join(&p, "adapter"), out);
        }
        out.push((join(prefix, "out_w"), self.out_w.view().into_dyn()));
        out.push((join(prefix, "out_b"), self.out_b.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((join(prefix, "in_w"), self.in_w.view_mut().into_dyn()));
        out.push((join(prefix, "in_b"), self.in_b.view_mut().into_dyn()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            out.push((join(&p, "w1"), b.w1.view_mut().into_dyn()));
            out.push((join(&p, "b1"), b.b1.view_mut().into_dyn()));
            out.push((join(&p, "w2"), b.w2.view_mut().into_dyn()));
            out.push((join(&p, "b2"), b.b2.view_mut().into_dyn()));
            out.push((join(&p, "w_t"), b.w_t.view_mut().into_dyn()));
            out.push((join(&p, "b_t"), b.b_t.view_mut().into_dyn()));
            b.adapter.visit_mut(&join(&p, "adapter"), out);
        }
        out.push((join(prefix, "out_w"), self.out_w.view_mut().into_dyn()));
        out.push((join(prefix, "out_b"), self.out_b.view_mut().into_dyn()));
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn add_row(m: &mut Array2<f64>, row: &Array1<f64>) {
    for mut r in m.rows_mut() {
        r += row;
    }
}

struct BlockCache {
    h_in: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    adapter: AdapterCache,
}

pub struct DenoiserCache {
    x: Array2<f64>,
    temb: Array1<f64>,
    blocks: Vec<BlockCache>,
    h_out: Array2<f64>,
}

/// Forward pass on positions: `x` is `[H·W × latent_channels]`.
pub fn denoiser_forward_positions(
    p: &DenoiserParams,
    x: ArrayView2<'_, f64>,
    t: usize,
    audio: ArrayView2<'_, f64>,
    masks: &RegionMasks,
) -> Result<(Array2<f64>, DenoiserCache)> {
    if x.ncols() != p.in_w.nrows() {
        return Err(Error::Shape(format!(
            "latent has {} channels, model expects {}",
            x.ncols(),
            p.in_w.nrows()
        )));
    }
    let temb = timestep_embedding(t, p.cfg.time_dim);
    let mut h = x.dot(&p.in_w);
    add_row(&mut h, &p.in_b);
    let mut caches = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let mut pre_act = h.dot(&b.w1);
        add_row(&mut pre_act, &b.b1);
        let act = pre_act.mapv(silu);
        let mut h1 = &h + &act.dot(&b.w2);
        let tp = temb.dot(&b.w_t) + &b.b_t + &b.b2;
        add_row(&mut h1, &tp);
        let (delta, adapter) = adapter_forward(&b.adapter, h1.view(), audio, masks)?;
        let h2 = &h1 + &delta;
        caches.push(BlockCache {
            h_in: std::mem::replace(&mut h, h2),
            pre_act,
            act,
            adapter,
        });
    }
    let mut out = h.dot(&p.out_w);
    add_row(&mut out, &p.out_b);
    Ok((
        out,
        DenoiserCache {
            x: x.to_owned(),
            temb,
            blocks: caches,
            h_out: h,
        },
    ))
}

/// Parameter gradients for upstream `d_out = ∂L/∂(predicted noise)`.
pub fn denoiser_backward_positions(
    p: &DenoiserParams,
    cache: &DenoiserCache,
    d_out: ArrayView2<'_, f64>,
) -> Result<DenoiserParams> {
    let mut g = p.zeros_like();
    g.out_w = cache.h_out.t().dot(&d_out);
    g.out_b = d_out.sum_axis(Axis(0));
    let mut dh = d_out.dot(&p.out_w.t());
    for (i, (b, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let (d_adapter_in, _, d_adapter) = adapter_backward_from_cache(&b.adapter, &bc.adapter, dh.view())?;
        let dh1 = dh + d_adapter_in;
        let gb = &mut g.blocks[i];
        gb.adapter = d_adapter;
        let d_tp = dh1.sum_axis(Axis(0));
        gb.w_t = outer(&cache.temb, &d_tp);
        gb.b_t = d_tp.clone();
        gb.b2 = d_tp;
        gb.w2 = bc.act.t().dot(&dh1);
        let mut d_pre = dh1.dot(&b.w2.t());
        ndarray::Zip::from(&mut d_pre)
            .and(&bc.pre_act)
            .for_each(|d, &u| *d *= silu_grad(u));
        gb.w1 = bc.h_in.t().dot(&d_pre);
        gb.b1 = d_pre.sum_axis(Axis(0));
        dh = dh1 + d_pre.dot(&b.w1.t());
    }
    g.in_w = cache.x.t().dot(&dh);
    g.in_b = dh.sum_axis(Axis(0));
    Ok(g)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

fn check_inputs(p: &DenoiserParams, z: &Latent, a: &AudioEmbedding, m: &RegionMasks) -> Result<()> {
    if m.dim() != (z.height(), z.width()) {
        return Err(Error::Shape(format!(
            "masks {:?} vs latent grid {}×{}",
            m.dim(),
            z.height(),
            z.width()
        )));
    }
    if a.dim() != p.cfg.audio_dim {
        return Err(Error::Shape(format!(
            "audio dim {} vs model audio dim {}",
            a.dim(),
            p.cfg.audio_dim
        )));
    }
    Ok(())
}

/// Predicted noise for `z_t` at timestep `t`.
pub fn denoiser_forward(
    z_t: &Latent,
    t: usize,
    a: &AudioEmbedding,
    m: &RegionMasks,
    p: &DenoiserParams,
) -> Result<Latent> {
    check_inputs(p, z_t, a, m)?;
    let (y, _) = denoiser_forward_positions(p, z_t.to_positions().view(), t, a.tokens.view(), m)?;
    Latent::from_positions(y.view(), z_t.height(), z_t.width())
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    /// Clean latent.
    pub z0: Latent,
    /// Audio context for this frame.
    pub audio: AudioEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainCfg {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            steps: 2000,
            seed: 0,
        }
    }
}

impl TrainCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig("lr, batch_size and steps must be positive".into()));
        }
        Ok(())
    }
}

/// Noise-prediction MSE and its parameter gradient for one batch, with the
/// timesteps and noise drawn from `rng`.
pub fn batch_loss_and_grad<R: Rng + ?Sized>(
    batch: &[&TrainExample],
    masks: &RegionMasks,
    p: &DenoiserParams,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut grad = vec![0.0; p.num_params()];
    let mut loss = 0.0;
    let numel: usize = batch.iter().map(|e| e.z0.data.len()).sum();
    let scale = 1.0 / numel as f64;
    for ex in batch {
        check_inputs(p, &ex.z0, &ex.audio, masks)?;
        let t = rng.random_range(0..s.len());
        let x0 = ex.z0.to_positions();
        let eps = Array2::from_shape_simple_fn(x0.dim(), || rng.sample::<f64, _>(StandardNormal));
        let (a, b) = noise_coeffs(s, t);
        let xt = &x0 * a + &eps * b;
        let (pred, cache) = denoiser_forward_positions(p, xt.view(), t, ex.audio.tokens.view(), masks)?;
        let diff = pred - &eps;
        loss += diff.iter().map(|d| d * d).sum::<f64>() * scale;
        let d_out = diff * (2.0 * scale);
        let g = denoiser_backward_positions(p, &cache, d_out.view())?;
        for (acc, v) in grad.iter_mut().zip(g.to_flat()) {
            *acc += v;
        }
    }
    Ok((loss, grad))
}

/// One Adam step on a batch. Returns the batch loss before the update.
pub fn train_step<R: Rng + ?Sized>(
    batch: &[&TrainExample],
    masks: &RegionMasks,
    p: &mut DenoiserParams,
    s: &NoiseSchedule,
    opt: &mut Adam,
    rng: &mut R,
) -> Result<f64> {
    let (loss, grad) = batch_loss_and_grad(batch, masks, p, s, rng)?;
    let step = opt.steps_taken() as usize;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss = {loss}"),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            step,
            detail: format!("gradient entry {i} is not finite"),
        });
    }
    let mut flat = p.to_flat();
    opt.update(&mut flat, &grad);
    p.load_flat(&flat)?;
    Ok(loss)
}

/// Seeded training loop over a pool of examples.
pub struct Trainer {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub opt: Adam,
    pub cfg: TrainCfg,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(params: DenoiserParams, schedule: NoiseSchedule, cfg: TrainCfg) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(params.num_params(), cfg.lr);
        Ok(Self {
            params,
            schedule,
            opt,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    /// Draws a batch uniformly with replacement and takes one step.
    pub fn step(&mut self, pool: &[TrainExample], masks: &RegionMasks) -> Result<f64> {
        if pool.is_empty() {
            return Err(Error::InvalidConfig("empty training pool".into()));
        }
        let batch: Vec<&TrainExample> = (0..self.cfg.batch_size)
            .map(|_| &pool[self.rng.random_range(0..pool.len())])
            .collect();
        train_step(
            &batch,
            masks,
            &mut self.params,
            &self.schedule,
            &mut self.opt,
            &mut self.rng,
        )
    }

    /// Runs `cfg.steps` steps, calling `on_step(step, loss)` after each.
    pub fn run(
        &mut self,
        pool: &[TrainExample],
        masks: &RegionMasks,
        mut on_step: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for step in 0..self.cfg.steps {
            let loss = self.step(pool, masks)?;
            on_step(step, loss);
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// DDIM timesteps, descending: `⌊i·T/steps⌋` for `i = steps-1 … 0`.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::InvalidConfig(format!(
            "sampling steps {steps} must be in 1..={train_steps}"
        )));
    }
    Ok((0..steps).rev().map(|i| i * train_steps / steps).collect())
}

/// Deterministic (η = 0) DDIM from a given starting noise.
pub fn ddim_sample_frame(
    x_init: ArrayView2<'_, f64>,
    audio: ArrayView2<'_, f64>,
    masks: &RegionMasks,
    p: &DenoiserParams,
    s: &NoiseSchedule,
    timesteps: &[usize],
) -> Result<Array2<f64>> {
    let mut x = x_init.to_owned();
    for (i, &t) in timesteps.iter().enumerate() {
        let (eps, _) = denoiser_forward_positions(p, x.view(), t, audio, masks)?;
        let ab = s.alpha_bar[t];
        let ab_prev = timesteps.get(i + 1).map_or(1.0, |&tp| s.alpha_bar[tp]);
        let x0 = ((&x - &(&eps * (1.0 - ab).sqrt())) / ab.sqrt()).mapv(|v| v.clamp(-1.0, 1.0));
        x = &x0 * ab_prev.sqrt() + &eps * (1.0 - ab_prev).sqrt();
    }
    Ok(x)
}

/// Generates one latent per audio frame.
///
/// Every frame of a clip starts from the same seeded noise and is conditioned
/// on the audio tokens within `context_radius` frames of it.
pub fn sample(
    audio: &AudioEmbedding,
    masks: &RegionMasks,
    p: &DenoiserParams,
    s: &NoiseSchedule,
    steps: usize,
    seed: u64,
    context_radius: usize,
) -> Result<Vec<Latent>> {
    let timesteps = ddim_timesteps(s.len(), steps)?;
    if audio.dim() != p.cfg.audio_dim {
        return Err(Error::Shape(format!(
            "audio dim {} vs model audio dim {}",
            audio.dim(),
            p.cfg.audio_dim
        )));
    }
    let (h, w) = masks.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Array2::from_shape_simple_fn((h * w, p.cfg.latent_channels), || rng.sample::<f64, _>(StandardNormal));
    (0..audio.len())
        .map(|f| {
            let ctx = audio.context_window(f, context_radius);
            let x = ddim_sample_frame(init.view(), ctx.tokens.view(), masks, p, s, &timesteps)?;
            Latent::from_positions(x.view(), h, w)
        })
        .collect()
}

/// Pixel values in `[0, 1]` ↔ latent values in `[-1, 1]`.
pub fn pixels_to_latent(pixels: &Latent) -> Latent {
    Latent {
        data: pixels.data.mapv(|v| 2.0 * v - 1.0),
    }
}

pub fn latent_to_pixels(z: &Latent) -> Latent {
    Latent {
        data: z.data.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)),
    }
}
