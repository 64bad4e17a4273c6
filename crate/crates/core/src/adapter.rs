//! Audio adapters: the semi-decoupled module and the fully-decoupled baseline.
//!
//! Semi-decoupled: one cross-attention over the whole latent produces a
//! coupled feature map; each facial region then gets its own zero-initialized
//! convolution of the masked map, and the three results are summed.
//!
//! ```text
//! F_coup   = attn(z, a)
//! F_decoup = conv_lip(F_coup ⊙ M_lip) + conv_exp(F_coup ⊙ M_exp) + conv_pose(F_coup ⊙ M_pose)
//! ```
//!
//! Fully-decoupled (Hallo-style baseline): three independent attentions, each
//! masked to its region and summed. Three attention evaluations per call
//! instead of one.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, attend_backward, AttnCache, AttnWeights, FeatureMap, Latent};
use crate::audio::AudioEmbedding;
use crate::params::{join, Parameters};
use crate::tensor_file::{DType, TensorFile};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Semi,
    Fully,
}

impl AdapterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Semi => "semi",
            AdapterKind::Fully => "fully",
        }
    }

    /// Attention evaluations per adapter call.
    pub fn attention_evaluations(self) -> u64 {
        match self {
            AdapterKind::Semi => 1,
            AdapterKind::Fully => 3,
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi" => Ok(AdapterKind::Semi),
            "fully" => Ok(AdapterKind::Fully),
            other => Err(Error::InvalidConfig(format!(
                "unknown adapter kind `{other}` (semi | fully)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub lip: Array2<f64>,
    pub exp: Array2<f64>,
    pub pose: Array2<f64>,
}

impl RegionMasks {
    pub fn new(lip: Array2<f64>, exp: Array2<f64>, pose: Array2<f64>) -> Result<Self> {
        if lip.dim() != exp.dim() || lip.dim() != pose.dim() {
            return Err(Error::Shape(format!(
                "mask shapes differ: lip {:?}, exp {:?}, pose {:?}",
                lip.dim(),
                exp.dim(),
                pose.dim()
            )));
        }
        for (name, m) in [("lip", &lip), ("exp", &exp), ("pose", &pose)] {
            if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidConfig(format!("{name} mask has values outside [0, 1]")));
            }
        }
        Ok(Self { lip, exp, pose })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            lip: Array2::zeros((height, width)),
            exp: Array2::zeros((height, width)),
            pose: Array2::zeros((height, width)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.lip.dim()
    }

    pub fn all_nonempty(&self) -> bool {
        [&self.lip, &self.exp, &self.pose]
            .iter()
            .all(|m| m.iter().any(|&v| v > 0.0))
    }

    pub fn regions(&self) -> [&Array2<f64>; 3] {
        [&self.lip, &self.exp, &self.pose]
    }

    /// Face foreground: pixels where `max(lip, exp) > 0`.
    pub fn foreground(&self) -> Array2<bool> {
        ndarray::Zip::from(&self.lip)
            .and(&self.exp)
            .map_collect(|&l, &e| l.max(e) > 0.0)
    }

    fn flat(m: &Array2<f64>) -> ArrayView1<'_, f64> {
        m.as_slice()
            .map(ArrayView1::from)
            .expect("masks are stored in standard layout")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = TensorFile::new();
        for (name, m) in [("lip", &self.lip), ("exp", &self.exp), ("pose", &self.pose)] {
            f.push(name, m.shape(), m.iter().copied().collect(), DType::F64)?;
        }
        f.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = TensorFile::read(path)?;
        let get = |name| -> Result<Array2<f64>> { f.require(name)?.to_array_of() };
        Self::new(get("lip")?, get("exp")?, get("pose")?)
    }
}

/// Rectangular default regions on an `H × W` grid:
/// lip on rows `[0.65H, 0.90H)` × cols `[0.30W, 0.70W)`,
/// expression on rows `[0.15H, 0.50H)` × cols `[0.20W, 0.80W)`,
/// pose everywhere else.
pub fn make_default_masks(height: usize, width: usize) -> Result<RegionMasks> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidConfig(format!(
            "mask grid {height}×{width} is smaller than 8×8"
        )));
    }
    let frac = |n: usize, pct: usize| n * pct / 100;
    let rect = |r0, r1, c0, c1| {
        Array2::from_shape_fn((height, width), |(y, x)| {
            if (frac(height, r0)..frac(height, r1)).contains(&y) && (frac(width, c0)..frac(width, c1)).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    };
    let lip = rect(65, 90, 30, 70);
    let exp = rect(15, 50, 20, 80);
    let pose = ndarray::Zip::from(&lip)
        .and(&exp)
        .map_collect(|&l, &e| 1.0 - f64::max(l, e));
    RegionMasks::new(lip, exp, pose)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroConv {
    /// `[C_out × C_in × k × k]`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

pub fn zero_conv_init(c_in: usize, c_out: usize, kernel: usize) -> Result<ZeroConv> {
    if kernel != 1 && kernel != 3 {
        return Err(Error::InvalidConfig(format!(
            "zero-conv kernel {kernel} unsupported (1 or 3)"
        )));
    }
    if c_in == 0 || c_out == 0 {
        return Err(Error::InvalidConfig("zero-conv channels must be positive".into()));
    }
    Ok(ZeroConv {
        weight: Array4::zeros((c_out, c_in, kernel, kernel)),
        bias: Array1::zeros(c_out),
    })
}

impl ZeroConv {
    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().0
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `[C_out × C_in]` slice of the kernel at tap `(ky, kx)`.
    fn tap(&self, ky: usize, kx: usize) -> ArrayView2<'_, f64> {
        self.weight.slice(s![.., .., ky, kx])
    }

    fn offset(&self, k: usize) -> isize {
        k as isize - (self.kernel() / 2) as isize
    }

    /// Convolution with zero padding on an `[H·W × C_in]` position matrix.
    pub fn apply(&self, x: ArrayView2<'_, f64>, height: usize, width: usize) -> Result<Array2<f64>> {
        if x.ncols() != self.c_in() || x.nrows() != height * width {
            return Err(Error::Shape(format!(
                "zero-conv expects [{} × {}] input, got {:?}",
                height * width,
                self.c_in(),
                x.dim()
            )));
        }
        let k = self.kernel();
        let mut y = Array2::from_shape_fn((x.nrows(), self.c_out()), |(_, c)| self.bias[c]);
        if k == 1 {
            y += &x.dot(&self.tap(0, 0).t());
            return Ok(y);
        }
        for ky in 0..k {
            for kx in 0..k {
                let shifted = shift(x, height, width, self.offset(ky), self.offset(kx));
                y += &shifted.dot(&self.tap(ky, kx).t());
            }
        }
        Ok(y)
    }

    /// Returns `(dx, grads)` for upstream `dy` at input `x`.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        height: usize,
        width: usize,
    ) -> (Array2<f64>, ZeroConv) {
        let k = self.kernel();
        let mut grads = ZeroConv {
            weight: Array4::zeros(self.weight.dim()),
            bias: dy.sum_axis(Axis(0)),
        };
        if k == 1 {
            grads.weight.slice_mut(s![.., .., 0, 0]).assign(&dy.t().dot(&x));
            return (dy.dot(&self.tap(0, 0)), grads);
        }
        let mut dx = Array2::zeros(x.dim());
        for ky in 0..k {
            for kx in 0..k {
                let (oy, ox) = (self.offset(ky), self.offset(kx));
                let shifted = shift(x, height, width, oy, ox);
                grads.weight.slice_mut(s![.., .., ky, kx]).assign(&dy.t().dot(&shifted));
                let d_shifted = dy.dot(&self.tap(ky, kx));
                dx += &shift(d_shifted.view(), height, width, -oy, -ox);
            }
        }
        (dx, grads)
    }
}

impl Parameters for ZeroConv {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

/// `out[y, x] = input[y + dy, x + dx]`, zero outside the grid.
fn shift(input: ArrayView2<'_, f64>, height: usize, width: usize, dy: isize, dx: isize) -> Array2<f64> {
    let mut out = Array2::zeros(input.dim());
    for y in 0..height {
        let sy = y as isize + dy;
        if sy < 0 || sy >= height as isize {
            continue;
        }
        for x in 0..width {
            let sx = x as isize + dx;
            if sx < 0 || sx >= width as isize {
                continue;
            }
            out.row_mut(y * width + x)
                .assign(&input.row(sy as usize * width + sx as usize));
        }
    }
    out
}

fn scale_rows(x: ArrayView2<'_, f64>, m: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for (mut row, &s) in out.rows_mut().into_iter().zip(m.iter()) {
        row *= s;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiDecoupledParams {
    pub attn: AttnWeights,
    pub zc_lip: ZeroConv,
    pub zc_exp: ZeroConv,
    pub zc_pose: ZeroConv,
}

impl SemiDecoupledParams {
    pub fn new(attn: AttnWeights, kernel: usize) -> Result<Self> {
        let c = attn.channels();
        Ok(Self {
            zc_lip: zero_conv_init(c, c, kernel)?,
            zc_exp: zero_conv_init(c, c, kernel)?,
            zc_pose: zero_conv_init(c, c, kernel)?,
            attn,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        audio_dim: usize,
        attn_dim: usize,
        heads: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(AttnWeights::init(channels, audio_dim, attn_dim, heads, rng)?, kernel)
    }

    pub fn convs(&self) -> [&ZeroConv; 3] {
        [&self.zc_lip, &self.zc_exp, &self.zc_pose]
    }

    fn convs_mut(&mut self) -> [&mut ZeroConv; 3] {
        [&mut self.zc_lip, &mut self.zc_exp, &mut self.zc_pose]
    }
}

impl Parameters for SemiDecoupledParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.attn.visit(&join(prefix, "attn"), out);
        self.zc_lip.visit(&join(prefix, "zc_lip"), out);
        self.zc_exp.visit(&join(prefix, "zc_exp"), out);
        self.zc_pose.visit(&join(prefix, "zc_pose"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        self.attn.visit_mut(&join(prefix, "attn"), out);
        self.zc_lip.visit_mut(&join(prefix, "zc_lip"), out);
        self.zc_exp.visit_mut(&join(prefix, "zc_exp"), out);
        self.zc_pose.visit_mut(&join(prefix, "zc_pose"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullyDecoupledParams {
    pub attn_lip: AttnWeights,
    pub attn_exp: AttnWeights,
    pub attn_pose: AttnWeights,
}

impl FullyDecoupledParams {
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        audio_dim: usize,
        attn_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn_lip: AttnWeights::init(channels, audio_dim, attn_dim, heads, rng)?,
            attn_exp: AttnWeights::init(channels, audio_dim, attn_dim, heads, rng)?,
            attn_pose: AttnWeights::init(channels, audio_dim, attn_dim, heads, rng)?,
        })
    }

    pub fn attns(&self) -> [&AttnWeights; 3] {
        [&self.attn_lip, &self.attn_exp, &self.attn_pose]
    }
}

impl Parameters for FullyDecoupledParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        self.attn_lip.visit(&join(prefix, "attn_lip"), out);
        self.attn_exp.visit(&join(prefix, "attn_exp"), out);
        self.attn_pose.visit(&join(prefix, "attn_pose"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        self.attn_lip.visit_mut(&join(prefix, "attn_lip"), out);
        self.attn_exp.visit_mut(&join(prefix, "attn_exp"), out);
        self.attn_pose.visit_mut(&join(prefix, "attn_pose"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterParams {
    Semi(SemiDecoupledParams),
    Fully(FullyDecoupledParams),
}

impl AdapterParams {
    pub fn init<R: Rng + ?Sized>(
        kind: AdapterKind,
        channels: usize,
        audio_dim: usize,
        attn_dim: usize,
        heads: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            AdapterKind::Semi => AdapterParams::Semi(SemiDecoupledParams::init(
                channels, audio_dim, attn_dim, heads, kernel, rng,
            )?),
            AdapterKind::Fully => {
                AdapterParams::Fully(FullyDecoupledParams::init(channels, audio_dim, attn_dim, heads, rng)?)
            }
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterParams::Semi(_) => AdapterKind::Semi,
            AdapterParams::Fully(_) => AdapterKind::Fully,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            AdapterParams::Semi(p) => p.attn.channels(),
            AdapterParams::Fully(p) => p.attn_lip.channels(),
        }
    }

    pub fn audio_dim(&self) -> usize {
        match self {
            AdapterParams::Semi(p) => p.attn.audio_dim(),
            AdapterParams::Fully(p) => p.attn_lip.audio_dim(),
        }
    }

    /// A parameter-shaped holder filled with zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

impl Parameters for AdapterParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        match self {
            AdapterParams::Semi(p) => p.visit(prefix, out),
            AdapterParams::Fully(p) => p.visit(prefix, out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        match self {
            AdapterParams::Semi(p) => p.visit_mut(prefix, out),
            AdapterParams::Fully(p) => p.visit_mut(prefix, out),
        }
    }
}

#[derive(Debug, Clone)]
pub enum AdapterCache {
    Semi {
        attn: AttnCache,
        coupled: Array2<f64>,
        masks: [Array1<f64>; 3],
        grid: (usize, usize),
    },
    Fully {
        attns: Vec<AttnCache>,
        masks: [Array1<f64>; 3],
    },
}

fn flat_masks(m: &RegionMasks) -> [Array1<f64>; 3] {
    m.regions().map(|r| RegionMasks::flat(r).to_owned())
}

/// Adapter on position matrices: `x` is `[H·W × C]`, `a` is `[T_a × D_a]`.
pub fn adapter_forward(
    params: &AdapterParams,
    x: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    masks: &RegionMasks,
) -> Result<(Array2<f64>, AdapterCache)> {
    let (height, width) = masks.dim();
    if x.nrows() != height * width {
        return Err(Error::Shape(format!(
            "latent has {} positions, masks are {height}×{width}",
            x.nrows()
        )));
    }
    let flat = flat_masks(masks);
    match params {
        AdapterParams::Semi(p) => {
            let (coupled, attn) = attend(x, a, &p.attn)?;
            let mut out = Array2::zeros(coupled.dim());
            for (conv, m) in p.convs().into_iter().zip(&flat) {
                let gated = scale_rows(coupled.view(), m.view());
                out += &conv.apply(gated.view(), height, width)?;
            }
            Ok((
                out,
                AdapterCache::Semi {
                    attn,
                    coupled,
                    masks: flat,
                    grid: (height, width),
                },
            ))
        }
        AdapterParams::Fully(p) => {
            let mut out = Array2::zeros((x.nrows(), p.attn_lip.channels()));
            let mut attns = Vec::with_capacity(3);
            for (w, m) in p.attns().into_iter().zip(&flat) {
                let (y, cache) = attend(x, a, w)?;
                out += &scale_rows(y.view(), m.view());
                attns.push(cache);
            }
            Ok((out, AdapterCache::Fully { attns, masks: flat }))
        }
    }
}

/// Returns `(dx, da, parameter gradients)`.
pub fn adapter_backward_from_cache(
    params: &AdapterParams,
    cache: &AdapterCache,
    dy: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>, AdapterParams)> {
    match (params, cache) {
        (
            AdapterParams::Semi(p),
            AdapterCache::Semi {
                attn,
                coupled,
                masks,
                grid: (height, width),
            },
        ) => {
            if dy.dim() != coupled.dim() {
                return Err(Error::Shape(format!(
                    "upstream {:?} does not match adapter output {:?}",
                    dy.dim(),
                    coupled.dim()
                )));
            }
            let mut grads = p.clone();
            let mut d_coupled = Array2::zeros(coupled.dim());
            for ((conv, g), m) in p.convs().into_iter().zip(grads.convs_mut()).zip(masks) {
                let gated = scale_rows(coupled.view(), m.view());
                let (d_gated, conv_grads) = conv.backward(gated.view(), dy, *height, *width);
                *g = conv_grads;
                d_coupled += &scale_rows(d_gated.view(), m.view());
            }
            let (dx, da, attn_grads) = attend_backward(attn, &p.attn, d_coupled.view())?;
            grads.attn = attn_grads;
            Ok((dx, da, AdapterParams::Semi(grads)))
        }
        (AdapterParams::Fully(p), AdapterCache::Fully { attns, masks }) => {
            let mut grads = p.clone();
            let mut dx: Option<Array2<f64>> = None;
            let mut da: Option<Array2<f64>> = None;
            let slots = [&mut grads.attn_lip, &mut grads.attn_exp, &mut grads.attn_pose];
            for (((w, cache), m), slot) in p.attns().into_iter().zip(attns).zip(masks).zip(slots) {
                let d_attn = scale_rows(dy, m.view());
                let (dxi, dai, gw) = attend_backward(cache, w, d_attn.view())?;
                *slot = gw;
                dx = Some(match dx {
                    Some(acc) => acc + dxi,
                    None => dxi,
                });
                da = Some(match da {
                    Some(acc) => acc + dai,
                    None => dai,
                });
            }
            Ok((dx.unwrap(), da.unwrap(), AdapterParams::Fully(grads)))
        }
        _ => Err(Error::Shape("adapter cache does not match parameter kind".into())),
    }
}

fn check_masks(z: &Latent, m: &RegionMasks) -> Result<()> {
    if m.dim() != (z.height(), z.width()) {
        return Err(Error::Shape(format!(
            "masks are {:?}, latent grid is {}×{}",
            m.dim(),
            z.height(),
            z.width()
        )));
    }
    Ok(())
}

fn forward_latent(z: &Latent, a: &AudioEmbedding, m: &RegionMasks, p: &AdapterParams) -> Result<FeatureMap> {
    check_masks(z, m)?;
    let (y, _) = adapter_forward(p, z.to_positions().view(), a.tokens.view(), m)?;
    Latent::from_positions(y.view(), z.height(), z.width())
}

pub fn semi_decoupled_forward(
    z_t: &Latent,
    a: &AudioEmbedding,
    m: &RegionMasks,
    p: &SemiDecoupledParams,
) -> Result<FeatureMap> {
    forward_latent(z_t, a, m, &AdapterParams::Semi(p.clone()))
}

pub fn fully_decoupled_forward(
    z_t: &Latent,
    a: &AudioEmbedding,
    m: &RegionMasks,
    p: &FullyDecoupledParams,
) -> Result<FeatureMap> {
    forward_latent(z_t, a, m, &AdapterParams::Fully(p.clone()))
}

#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub d_latent: Latent,
    pub d_audio: Array2<f64>,
    pub d_params: AdapterParams,
}

pub fn adapter_backward(
    params: &AdapterParams,
    z_t: &Latent,
    a: &AudioEmbedding,
    m: &RegionMasks,
    upstream: &FeatureMap,
) -> Result<AdapterGrads> {
    check_masks(z_t, m)?;
    if upstream.shape() != z_t.shape() {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match latent {:?}",
            upstream.shape(),
            z_t.shape()
        )));
    }
    let (_, cache) = adapter_forward(params, z_t.to_positions().view(), a.tokens.view(), m)?;
    let (dx, da, d_params) = adapter_backward_from_cache(params, &cache, upstream.to_positions().view())?;
    Ok(AdapterGrads {
        d_latent: Latent::from_positions(dx.view(), z_t.height(), z_t.width())?,
        d_audio: da,
        d_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_calls, cross_attention};
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latent(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Latent {
        Latent::new(Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn audio(rng: &mut ChaCha8Rng, t: usize, d: usize) -> AudioEmbedding {
        AudioEmbedding::new(Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    fn randomize_convs(p: &mut SemiDecoupledParams, rng: &mut ChaCha8Rng) {
        for conv in p.convs_mut() {
            conv.weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            conv.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }

    #[test]
    fn default_masks_32() {
        let m = make_default_masks(32, 32).unwrap();
        let ones: Vec<(usize, usize)> = m
            .lip
            .indexed_iter()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ones.len(), 8 * 13);
        assert!(ones
            .iter()
            .all(|&(y, x)| (20..=27).contains(&y) && (9..=21).contains(&x)));
        for ((l, e), p) in m.lip.iter().zip(m.exp.iter()).zip(m.pose.iter()) {
            assert_eq!(l.max(*e).max(*p), 1.0);
            if *l == 1.0 || *e == 1.0 {
                assert_eq!(*p, 0.0);
            }
        }
    }

    #[test]
    fn default_masks_minimum_grid() {
        let m = make_default_masks(8, 8).unwrap();
        assert!(m.all_nonempty());
        // lip rows 5..7 × cols 2..5; exp rows 1..4 × cols 1..6
        assert_eq!(m.lip.sum(), 6.0);
        assert_eq!(m.exp.sum(), 15.0);
        assert_eq!(m.pose.sum(), 64.0 - 21.0);
        assert!(make_default_masks(7, 8).is_err());
    }

    #[test]
    fn mask_validation() {
        let ok = Array2::zeros((4, 4));
        assert!(RegionMasks::new(ok.clone(), ok.clone(), Array2::zeros((4, 5))).is_err());
        let mut bad = ok.clone();
        bad[[0, 0]] = 1.5;
        assert!(RegionMasks::new(bad, ok.clone(), ok).is_err());
    }

    #[test]
    fn masks_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_default_masks(16, 12).unwrap();
        let path = dir.path().join("masks.sdtf");
        m.save(&path).unwrap();
        assert_eq!(RegionMasks::load(&path).unwrap(), m);
    }

    #[test]
    fn zero_conv_is_silent_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let conv = zero_conv_init(4, 4, k).unwrap();
            let x = Array2::from_shape_fn((20, 4), |_| rng.random_range(-3.0..3.0));
            let y = conv.apply(x.view(), 4, 5).unwrap();
            assert_eq!(y.dim(), (20, 4));
            assert!(y.iter().all(|&v| v == 0.0));
        }
        assert_eq!(zero_conv_init(4, 4, 1).unwrap().num_params(), 16 + 4);
        assert!(zero_conv_init(4, 4, 2).is_err());
    }

    #[test]
    fn conv3_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w, ci, co) = (4, 5, 2, 3);
        let mut conv = zero_conv_init(ci, co, 3).unwrap();
        conv.weight.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        conv.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((h * w, ci), |_| rng.random_range(-1.0..1.0));
        let y = conv.apply(x.view(), h, w).unwrap();
        for yy in 0..h {
            for xx in 0..w {
                for o in 0..co {
                    let mut acc = conv.bias[o];
                    for i in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += conv.weight[[o, i, ky, kx]] * x[[sy as usize * w + sx as usize, i]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[yy * w + xx, o]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fresh_semi_adapter_outputs_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SemiDecoupledParams::init(4, 3, 8, 2, 1, &mut rng).unwrap();
        let m = make_default_masks(8, 8).unwrap();
        for _ in 0..3 {
            let z = latent(&mut rng, 4, 8, 8);
            let a = audio(&mut rng, 5, 3);
            let y = semi_decoupled_forward(&z, &a, &m, &p).unwrap();
            assert!(y.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn empty_masks_leave_only_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = SemiDecoupledParams::init(3, 2, 4, 2, 1, &mut rng).unwrap();
        randomize_convs(&mut p, &mut rng);
        let m = RegionMasks::zeros(4, 4);
        let z = latent(&mut rng, 3, 4, 4);
        let a = audio(&mut rng, 3, 2);
        let y = semi_decoupled_forward(&z, &a, &m, &p).unwrap();
        let bias_sum = &p.zc_lip.bias + &p.zc_exp.bias + &p.zc_pose.bias;
        for c in 0..3 {
            for v in y.data.index_axis(Axis(0), c).iter() {
                assert!((v - bias_sum[c]).abs() < 1e-15);
            }
        }
        let fully = FullyDecoupledParams::init(3, 2, 4, 2, &mut rng).unwrap();
        let y = fully_decoupled_forward(&z, &a, &m, &fully).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_lip_conv_recovers_coupled_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w) = (3, 4, 5);
        let mut p = SemiDecoupledParams::init(c, 2, 4, 2, 1, &mut rng).unwrap();
        for i in 0..c {
            p.zc_lip.weight[[i, i, 0, 0]] = 1.0;
        }
        let m = RegionMasks::new(Array2::ones((h, w)), Array2::zeros((h, w)), Array2::zeros((h, w))).unwrap();
        let z = latent(&mut rng, c, h, w);
        let a = audio(&mut rng, 3, 2);
        let y = semi_decoupled_forward(&z, &a, &m, &p).unwrap();
        let f = cross_attention(&z, &a, &p.attn).unwrap();
        for (u, v) in y.data.iter().zip(f.data.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_branches_with_partitioning_masks_equal_single_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let attn = AttnWeights::init(3, 2, 4, 2, &mut rng).unwrap();
        let p = FullyDecoupledParams {
            attn_lip: attn.clone(),
            attn_exp: attn.clone(),
            attn_pose: attn.clone(),
        };
        let lip = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..0.5));
        let exp = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..0.5));
        let pose = 1.0 - &lip - &exp;
        let m = RegionMasks::new(lip, exp, pose).unwrap();
        let z = latent(&mut rng, 3, 8, 8);
        let a = audio(&mut rng, 4, 2);
        let y = fully_decoupled_forward(&z, &a, &m, &p).unwrap();
        let f = cross_attention(&z, &a, &attn).unwrap();
        for (u, v) in y.data.iter().zip(f.data.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_call_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = make_default_masks(8, 8).unwrap();
        let z = latent(&mut rng, 2, 8, 8);
        let a = audio(&mut rng, 3, 2);
        let semi = SemiDecoupledParams::init(2, 2, 2, 1, 1, &mut rng).unwrap();
        let fully = FullyDecoupledParams::init(2, 2, 2, 1, &mut rng).unwrap();
        let before = attention_calls();
        semi_decoupled_forward(&z, &a, &m, &semi).unwrap();
        assert_eq!(attention_calls() - before, 1);
        let before = attention_calls();
        fully_decoupled_forward(&z, &a, &m, &fully).unwrap();
        assert_eq!(attention_calls() - before, 3);
    }

    #[test]
    fn zero_init_semi_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = AdapterParams::Semi(SemiDecoupledParams::init(3, 2, 4, 2, 1, &mut rng).unwrap());
        let m = make_default_masks(8, 8).unwrap();
        let z = latent(&mut rng, 3, 8, 8);
        let a = audio(&mut rng, 3, 2);
        let up = latent(&mut rng, 3, 8, 8);
        let g = adapter_backward(&p, &z, &a, &m, &up).unwrap();
        let AdapterParams::Semi(gp) = &g.d_params else {
            unreachable!()
        };
        assert!(gp.attn.to_flat().iter().all(|&v| v == 0.0));
        assert!(g.d_latent.data.iter().all(|&v| v == 0.0));
        for conv in gp.convs() {
            assert!(conv.weight.iter().any(|&v| v != 0.0));
        }

        let zero = Latent::zeros(3, 8, 8);
        let g = adapter_backward(&p, &z, &a, &m, &zero).unwrap();
        assert!(g.d_params.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = SemiDecoupledParams::init(3, 2, 4, 2, 1, &mut rng).unwrap();
        let z = latent(&mut rng, 3, 8, 8);
        let a = audio(&mut rng, 3, 2);
        let m = make_default_masks(8, 9).unwrap();
        assert!(matches!(semi_decoupled_forward(&z, &a, &m, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("semi".parse::<AdapterKind>().unwrap(), AdapterKind::Semi);
        assert_eq!("fully".parse::<AdapterKind>().unwrap(), AdapterKind::Fully);
        assert!("hallo".parse::<AdapterKind>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn zero_init_silence_is_exact(seed in any::<u64>(), k in prop_oneof![Just(1usize), Just(3usize)]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = SemiDecoupledParams::init(2, 3, 4, 2, k, &mut rng).unwrap();
            let m = make_default_masks(8, 8).unwrap();
            let z = Latent::new(Array3::from_shape_fn((2, 8, 8), |_| rng.random_range(-100.0..100.0))).unwrap();
            let a = audio(&mut rng, 4, 3);
            let y = semi_decoupled_forward(&z, &a, &m, &p).unwrap();
            prop_assert!(y.data.iter().all(|&v| v == 0.0));
        }

        #[test]
        fn mask_scaling_is_linear_per_term(seed in any::<u64>(), alpha in 0.0f64..1.0, region in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = SemiDecoupledParams::init(2, 3, 4, 2, 1, &mut rng).unwrap();
            randomize_convs(&mut p, &mut rng);
            for conv in p.convs_mut() {
                conv.bias.fill(0.0);
            }
            let base = make_default_masks(8, 8).unwrap();
            let z = latent(&mut rng, 2, 8, 8);
            let a = audio(&mut rng, 3, 3);

            let only = |keep: usize, scale: f64| {
                let mut m = RegionMasks::zeros(8, 8);
                let src = base.regions()[keep].clone() * scale;
                match keep { 0 => m.lip = src, 1 => m.exp = src, _ => m.pose = src }
                m
            };
            let term = semi_decoupled_forward(&z, &a, &only(region, 1.0), &p).unwrap();
            let scaled = semi_decoupled_forward(&z, &a, &only(region, alpha), &p).unwrap();
            for (t, s) in term.data.iter().zip(scaled.data.iter()) {
                prop_assert!((alpha * t - s).abs() <= 1e-12);
            }

            // With conv i zeroed, mask i has no influence at all.
            let mut q = p.clone();
            q.convs_mut()[region].weight.fill(0.0);
            let mut altered = base.clone();
            match region { 0 => altered.lip.fill(0.3), 1 => altered.exp.fill(0.3), _ => altered.pose.fill(0.3) }
            let y1 = semi_decoupled_forward(&z, &a, &base, &q).unwrap();
            let y2 = semi_decoupled_forward(&z, &a, &altered, &q).unwrap();
            prop_assert_eq!(y1, y2);
        }
    }
}
