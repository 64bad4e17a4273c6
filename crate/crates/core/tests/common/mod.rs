//! Finite-difference and brute-force oracles shared by the gradient tests
//! and the acceptance runner.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdtalk_core::adapter::{adapter_backward, adapter_forward, AdapterKind, AdapterParams, RegionMasks};
use sdtalk_core::attention::{cross_attention, cross_attention_backward, AttnWeights, Latent};
use sdtalk_core::audio::AudioEmbedding;
use sdtalk_core::diffusion::{denoiser_backward_positions, denoiser_forward_positions, DenoiserCfg, DenoiserParams};
use sdtalk_core::params::Parameters;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so gradients that are zero up to
/// rounding are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Largest relative error of `analytic` against central differences of
/// `loss` over each coordinate of `x0`.
pub fn fd_max_rel_err(x0: &[f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = loss(&x);
        x[i] = orig - FD_STEP;
        let down = loss(&x);
        x[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

pub fn latent(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Latent {
    Latent::new(Array3::from_shape_simple_fn((c, h, w), || rng.random_range(-1.0..1.0))).unwrap()
}

pub fn audio(rng: &mut ChaCha8Rng, t: usize, d: usize) -> AudioEmbedding {
    AudioEmbedding::new(uniform2(rng, t, d)).unwrap()
}

/// Soft, overlapping masks so every region's gradient path is exercised.
pub fn soft_masks(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RegionMasks {
    let mut m = || Array2::from_shape_simple_fn((h, w), || rng.random_range(0.0..1.0));
    RegionMasks::new(m(), m(), m()).unwrap()
}

fn dot(a: &Latent, b: &Latent) -> f64 {
    (&a.data * &b.data).sum()
}

fn set_flat<P: Parameters + Clone>(p: &P, flat: &[f64]) -> P {
    let mut q = p.clone();
    q.load_flat(flat).unwrap();
    q
}

#[derive(Debug, Clone, Copy)]
pub struct GradErrors {
    pub params: f64,
    pub latent: f64,
    pub audio: f64,
}

impl GradErrors {
    pub fn max(&self) -> f64 {
        self.params.max(self.latent).max(self.audio)
    }
}

/// Cross-attention with `L = Σ attn(z, a) ⊙ U`.
pub fn attention_fd(
    seed: u64,
    c: usize,
    da: usize,
    d: usize,
    heads: usize,
    ta: usize,
    h: usize,
    w: usize,
) -> GradErrors {
    let mut r = rng(seed);
    let wts = AttnWeights::init(c, da, d, heads, &mut r).unwrap();
    let z = latent(&mut r, c, h, w);
    let a = audio(&mut r, ta, da);
    let u = latent(&mut r, c, h, w);
    let g = cross_attention_backward(&z, &a, &wts, &u).unwrap();

    let params = fd_max_rel_err(&wts.to_flat(), &g.d_weights.to_flat(), |f| {
        dot(&cross_attention(&z, &a, &set_flat(&wts, f)).unwrap(), &u)
    });
    let zf: Vec<f64> = z.data.iter().copied().collect();
    let latent_err = fd_max_rel_err(&zf, &g.d_latent.data.iter().copied().collect::<Vec<_>>(), |f| {
        let zz = Latent::new(Array3::from_shape_vec(z.data.dim(), f.to_vec()).unwrap()).unwrap();
        dot(&cross_attention(&zz, &a, &wts).unwrap(), &u)
    });
    let af: Vec<f64> = a.tokens.iter().copied().collect();
    let audio_err = fd_max_rel_err(&af, &g.d_audio.iter().copied().collect::<Vec<_>>(), |f| {
        let aa = AudioEmbedding::new(Array2::from_shape_vec(a.tokens.dim(), f.to_vec()).unwrap()).unwrap();
        dot(&cross_attention(&z, &aa, &wts).unwrap(), &u)
    });
    GradErrors {
        params,
        latent: latent_err,
        audio: audio_err,
    }
}

fn adapter_out(p: &AdapterParams, z: &Latent, a: &AudioEmbedding, m: &RegionMasks) -> Latent {
    let (y, _) = adapter_forward(p, z.to_positions().view(), a.tokens.view(), m).unwrap();
    Latent::from_positions(y.view(), z.height(), z.width()).unwrap()
}

/// Either adapter, with every parameter (including the zero-initialized
/// convolutions) randomized first.
pub fn adapter_fd(seed: u64, kind: AdapterKind, kernel: usize) -> GradErrors {
    let (c, da, d, heads, ta, h, w) = (3, 2, 4, 2, 3, 4, 4);
    let mut r = rng(seed);
    let mut p = AdapterParams::init(kind, c, da, d, heads, kernel, &mut r).unwrap();
    let flat: Vec<f64> = (0..p.num_params()).map(|_| r.random_range(-0.8..0.8)).collect();
    p.load_flat(&flat).unwrap();
    let z = latent(&mut r, c, h, w);
    let a = audio(&mut r, ta, da);
    let m = soft_masks(&mut r, h, w);
    let u = latent(&mut r, c, h, w);
    let g = adapter_backward(&p, &z, &a, &m, &u).unwrap();

    let params = fd_max_rel_err(&flat, &g.d_params.to_flat(), |f| {
        dot(&adapter_out(&set_flat(&p, f), &z, &a, &m), &u)
    });
    let zf: Vec<f64> = z.data.iter().copied().collect();
    let latent_err = fd_max_rel_err(&zf, &g.d_latent.data.iter().copied().collect::<Vec<_>>(), |f| {
        let zz = Latent::new(Array3::from_shape_vec(z.data.dim(), f.to_vec()).unwrap()).unwrap();
        dot(&adapter_out(&p, &zz, &a, &m), &u)
    });
    let af: Vec<f64> = a.tokens.iter().copied().collect();
    let audio_err = fd_max_rel_err(&af, &g.d_audio.iter().copied().collect::<Vec<_>>(), |f| {
        let aa = AudioEmbedding::new(Array2::from_shape_vec(a.tokens.dim(), f.to_vec()).unwrap()).unwrap();
        dot(&adapter_out(&p, &z, &aa, &m), &u)
    });
    GradErrors {
        params,
        latent: latent_err,
        audio: audio_err,
    }
}

/// The tiny denoiser (all dims ≤ 4), every parameter randomized.
pub fn denoiser_fd(seed: u64, kind: AdapterKind) -> f64 {
    let cfg = DenoiserCfg {
        kind,
        latent_channels: 1,
        channels: 2,
        attn_dim: 4,
        heads: 2,
        audio_dim: 3,
        blocks: 2,
        zero_conv_kernel: 1,
        time_dim: 4,
    };
    let (h, w, ta) = (4, 4, 3);
    let mut r = rng(seed);
    let mut p = DenoiserParams::init(cfg, &mut r).unwrap();
    let flat: Vec<f64> = (0..p.num_params()).map(|_| r.random_range(-0.8..0.8)).collect();
    p.load_flat(&flat).unwrap();
    let x = uniform2(&mut r, h * w, 1);
    let a = uniform2(&mut r, ta, 3);
    let m = soft_masks(&mut r, h, w);
    let u = uniform2(&mut r, h * w, 1);
    let t = 37;
    let (_, cache) = denoiser_forward_positions(&p, x.view(), t, a.view(), &m).unwrap();
    let g = denoiser_backward_positions(&p, &cache, u.view()).unwrap();
    fd_max_rel_err(&flat, &g.to_flat(), |f| {
        let q = set_flat(&p, f);
        let (y, _) = denoiser_forward_positions(&q, x.view(), t, a.view(), &m).unwrap();
        (&y * &u).sum()
    })
}

/// Direct scalar evaluation of multi-head cross-attention for one position.
pub fn brute_force_attention(x: &[f64], a: &Array2<f64>, w: &AttnWeights) -> Vec<f64> {
    let (c, d, heads) = (x.len(), w.w_q.ncols(), w.heads);
    let dh = d / heads;
    let ta = a.nrows();
    let q: Vec<f64> = (0..d).map(|j| (0..c).map(|i| x[i] * w.w_q[[i, j]]).sum()).collect();
    let proj = |m: &Array2<f64>, s: usize, j: usize| -> f64 { (0..a.ncols()).map(|i| a[[s, i]] * m[[i, j]]).sum() };
    let mut o = vec![0.0; d];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        let scores: Vec<f64> = (0..ta)
            .map(|s| cols.clone().map(|j| q[j] * proj(&w.w_k, s, j)).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let exps: Vec<f64> = scores.iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in cols {
            o[j] = (0..ta).map(|s| exps[s] / z * proj(&w.w_v, s, j)).sum();
        }
    }
    (0..c).map(|k| (0..d).map(|j| o[j] * w.w_o[[j, k]]).sum()).collect()
}

/// Largest absolute difference between `cross_attention` and the scalar
/// oracle at C = 2, D = 2, T_a = 2, H = W = 1.
pub fn brute_force_gap(seed: u64, heads: usize) -> f64 {
    let mut r = rng(seed);
    let w = AttnWeights::init(2, 2, 2, heads, &mut r).unwrap();
    let z = latent(&mut r, 2, 1, 1);
    let a = audio(&mut r, 2, 2);
    let y = cross_attention(&z, &a, &w).unwrap();
    let expect = brute_force_attention(&[z.data[[0, 0, 0]], z.data[[1, 0, 0]]], &a.tokens, &w);
    (0..2)
        .map(|k| (y.data[[k, 0, 0]] - expect[k]).abs())
        .fold(0.0, f64::max)
}
