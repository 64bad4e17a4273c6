//! Multi-head cross-attention from a latent map (queries) to audio tokens
//! (keys and values), with hand-derived reverse-mode gradients.
//!
//! Internally a `[C × H × W]` map is handled as an `[H·W × C]` matrix of
//! positions, which turns every projection into a single matrix product.

use std::cell::Cell;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

use crate::audio::AudioEmbedding;
use crate::params::{join, Parameters};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    /// `[C × H × W]`
    pub data: Array3<f64>,
}

/// Output of a cross-attention or adapter; always shaped like the query latent.
pub type FeatureMap = Latent;

impl Latent {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("latent dims must be positive, got {c}×{h}×{w}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// `[H·W × C]`, row index `y * W + x`.
    pub fn to_positions(&self) -> Array2<f64> {
        let (c, h, w) = self.data.dim();
        let flat = self.data.view().into_shape_with_order((c, h * w)).expect("contiguous");
        flat.t().as_standard_layout().into_owned()
    }

    pub fn from_positions(x: ArrayView2<'_, f64>, height: usize, width: usize) -> Result<Self> {
        if x.nrows() != height * width {
            return Err(Error::Shape(format!(
                "{} positions cannot fill a {height}×{width} grid",
                x.nrows()
            )));
        }
        let c = x.ncols();
        let data = x
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, height, width))
            .expect("sizes checked");
        Ok(Self { data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights {
    /// `[C × D]`
    pub w_q: Array2<f64>,
    /// `[D_a × D]`
    pub w_k: Array2<f64>,
    /// `[D_a × D]`
    pub w_v: Array2<f64>,
    /// `[D × C]`
    pub w_o: Array2<f64>,
    pub heads: usize,
}

impl AttnWeights {
    pub fn zeros(channels: usize, audio_dim: usize, attn_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || attn_dim % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention dim {attn_dim} is not divisible by {heads} heads"
            )));
        }
        if channels == 0 || audio_dim == 0 {
            return Err(Error::InvalidConfig("attention dims must be positive".into()));
        }
        Ok(Self {
            w_q: Array2::zeros((channels, attn_dim)),
            w_k: Array2::zeros((audio_dim, attn_dim)),
            w_v: Array2::zeros((audio_dim, attn_dim)),
            w_o: Array2::zeros((attn_dim, channels)),
            heads,
        })
    }

    /// Uniform in `±1/√fan_in` per matrix.
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        audio_dim: usize,
        attn_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = Self::zeros(channels, audio_dim, attn_dim, heads)?;
        for m in [&mut w.w_q, &mut w.w_k, &mut w.w_v, &mut w.w_o] {
            fill_uniform_fan_in(m, rng);
        }
        Ok(w)
    }

    pub fn channels(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn audio_dim(&self) -> usize {
        self.w_k.nrows()
    }

    pub fn attn_dim(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn head_dim(&self) -> usize {
        self.attn_dim() / self.heads
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels(), self.audio_dim(), self.attn_dim(), self.heads)
            .expect("dims come from a valid instance")
    }

    fn check(&self) -> Result<()> {
        let (c, d) = self.w_q.dim();
        let da = self.w_k.nrows();
        if self.w_k.dim() != (da, d) || self.w_v.dim() != (da, d) || self.w_o.dim() != (d, c) {
            return Err(Error::Shape("inconsistent attention weight shapes".into()));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Shape(format!(
                "attention dim {d} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

impl Parameters for AttnWeights {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "w_q"), self.w_q.view().into_dyn()));
        out.push((join(prefix, "w_k"), self.w_k.view().into_dyn()));
        out.push((join(prefix, "w_v"), self.w_v.view().into_dyn()));
        out.push((join(prefix, "w_o"), self.w_o.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((join(prefix, "w_q"), self.w_q.view_mut().into_dyn()));
        out.push((join(prefix, "w_k"), self.w_k.view_mut().into_dyn()));
        out.push((join(prefix, "w_v"), self.w_v.view_mut().into_dyn()));
        out.push((join(prefix, "w_o"), self.w_o.view_mut().into_dyn()));
    }
}

pub(crate) fn fill_uniform_fan_in<R: Rng + ?Sized>(m: &mut Array2<f64>, rng: &mut R) {
    let bound = 1.0 / (m.nrows() as f64).sqrt();
    m.mapv_inplace(|_| rng.random_range(-bound..bound));
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(m: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    softmax_rows_inplace(&mut out);
    out
}

pub(crate) fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

thread_local! {
    static ATTENTION_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of attention evaluations performed on the current thread.
pub fn attention_calls() -> u64 {
    ATTENTION_CALLS.with(Cell::get)
}

/// Intermediates kept by [`attend`] for the backward pass.
#[derive(Debug, Clone)]
pub struct AttnCache {
    x: Array2<f64>,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per head `[N × T_a]` attention probabilities.
    probs: Vec<Array2<f64>>,
    /// Concatenated head outputs `[N × D]`.
    o: Array2<f64>,
}

impl AttnCache {
    pub fn probs(&self) -> &[Array2<f64>] {
        &self.probs
    }
}

/// Cross-attention on position matrices: `x` is `[N × C]`, `a` is `[T_a × D_a]`.
pub fn attend(x: ArrayView2<'_, f64>, a: ArrayView2<'_, f64>, w: &AttnWeights) -> Result<(Array2<f64>, AttnCache)> {
    w.check()?;
    if x.ncols() != w.channels() {
        return Err(Error::Shape(format!(
            "latent has {} channels, W_Q expects {}",
            x.ncols(),
            w.channels()
        )));
    }
    if a.ncols() != w.audio_dim() {
        return Err(Error::Shape(format!(
            "audio tokens have dim {}, W_K expects {}",
            a.ncols(),
            w.audio_dim()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::Shape("no audio tokens".into()));
    }
    ATTENTION_CALLS.with(|c| c.set(c.get() + 1));

    let q = x.dot(&w.w_q);
    let k = a.dot(&w.w_k);
    let v = a.dot(&w.w_v);
    let dh = w.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Array2::zeros((x.nrows(), w.attn_dim()));
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        softmax_rows_inplace(&mut scores);
        o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let y = o.dot(&w.w_o);
    let cache = AttnCache {
        x: x.to_owned(),
        a: a.to_owned(),
        q,
        k,
        v,
        probs,
        o,
    };
    Ok((y, cache))
}

/// Gradients of `attend` given `dy = ∂L/∂y`. Returns `(dx, da, dW)`.
pub fn attend_backward(
    cache: &AttnCache,
    w: &AttnWeights,
    dy: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>, AttnWeights)> {
    if dy.dim() != (cache.x.nrows(), w.channels()) {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match output ({}, {})",
            dy.dim(),
            cache.x.nrows(),
            w.channels()
        )));
    }
    let dh = w.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut grads = w.zeros_like();
    grads.w_o = cache.o.t().dot(&dy);
    let d_o = dy.dot(&w.w_o.t());

    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_oh = d_o.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&d_oh));
        let d_p = d_oh.dot(&cache.v.slice(cols).t());
        // Softmax Jacobian: dS = P ⊙ (dP − rowsum(dP ⊙ P)).
        let row_dot = (&d_p * p).sum_axis(Axis(1));
        let mut d_s = d_p;
        Zip::from(d_s.rows_mut())
            .and(p.rows())
            .and(&row_dot)
            .for_each(|mut ds, pr, &rd| {
                Zip::from(&mut ds)
                    .and(&pr)
                    .for_each(|g, &pv| *g = pv * (*g - rd) * scale);
            });
        dq.slice_mut(cols).assign(&d_s.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&d_s.t().dot(&cache.q.slice(cols)));
    }

    grads.w_q = cache.x.t().dot(&dq);
    grads.w_k = cache.a.t().dot(&dk);
    grads.w_v = cache.a.t().dot(&dv);
    let dx = dq.dot(&w.w_q.t());
    let da = dk.dot(&w.w_k.t()) + dv.dot(&w.w_v.t());
    Ok((dx, da, grads))
}

pub fn cross_attention(z: &Latent, a: &AudioEmbedding, w: &AttnWeights) -> Result<FeatureMap> {
    if z.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent".into()));
    }
    if a.tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("audio embedding".into()));
    }
    let (y, _) = attend(z.to_positions().view(), a.tokens.view(), w)?;
    Latent::from_positions(y.view(), z.height(), z.width())
}

#[derive(Debug, Clone)]
pub struct AttnGrads {
    pub d_latent: Latent,
    pub d_audio: Array2<f64>,
    pub d_weights: AttnWeights,
}

pub fn cross_attention_backward(
    z: &Latent,
    a: &AudioEmbedding,
    w: &AttnWeights,
    upstream: &FeatureMap,
) -> Result<AttnGrads> {
    if upstream.shape() != z.shape() {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match latent {:?}",
            upstream.shape(),
            z.shape()
        )));
    }
    let (_, cache) = attend(z.to_positions().view(), a.tokens.view(), w)?;
    let (dx, da, d_weights) = attend_backward(&cache, w, upstream.to_positions().view())?;
    Ok(AttnGrads {
        d_latent: Latent::from_positions(dx.view(), z.height(), z.width())?,
        d_audio: da,
        d_weights,
    })
}
