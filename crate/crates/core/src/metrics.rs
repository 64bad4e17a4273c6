//! Proxy video metrics: motion smoothness, subject and background
//! consistency, and a correlation/lag lip-sync score.
//!
//! These are self-contained proxies computed directly on pixels. They are
//! comparable across adapter kinds within this crate and nothing else.

use std::io::Write;

use ndarray::{Array4, ArrayView1, Axis};
use serde::Serialize;

use crate::adapter::RegionMasks;
use crate::{Error, Result};

pub const DEFAULT_MAX_LAG: usize = 2;

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n != b.len() || n < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Rounding in the mean leaves tiny residuals on constant input.
    let flat = |ss: f64, xs: &[f64]| {
        let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        ss.sqrt() <= 1e-12 * scale * (n as f64).sqrt()
    };
    if flat(saa, a) || flat(sbb, b) {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn check_frames(frames: &Array4<f64>, min: usize) -> Result<()> {
    if frames.dim().0 < min {
        return Err(Error::InvalidConfig(format!(
            "need at least {min} frames, got {}",
            frames.dim().0
        )));
    }
    Ok(())
}

/// `1 − mean_t mean|f_{t+1} − f_t|`.
pub fn smoothness(frames: &Array4<f64>) -> Result<f64> {
    check_frames(frames, 2)?;
    let n = frames.dim().0;
    let per_pair = frames.len() / n;
    let mut total = 0.0;
    for t in 0..n - 1 {
        let a = frames.index_axis(Axis(0), t);
        let b = frames.index_axis(Axis(0), t + 1);
        total += a.iter().zip(b.iter()).map(|(x, y)| (y - x).abs()).sum::<f64>() / per_pair as f64;
    }
    Ok(1.0 - total / (n - 1) as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        0.0
    } else {
        // sqrt(x·x) rounds back to |x| exactly, so identical inputs give 1.
        (dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0)
    }
}

fn region_consistency(frames: &Array4<f64>, masks: &RegionMasks, foreground: bool, what: &str) -> Result<f64> {
    check_frames(frames, 2)?;
    let (_, _, h, w) = frames.dim();
    if masks.dim() != (h, w) {
        return Err(Error::Shape(format!("masks {:?} vs frames {h}×{w}", masks.dim())));
    }
    let select = masks.foreground().mapv(|fg| fg == foreground);
    if !select.iter().any(|&s| s) {
        return Err(Error::InvalidConfig(format!("empty {what} region")));
    }
    let pick = |t: usize| -> Vec<f64> {
        let f = frames.index_axis(Axis(0), t);
        let mut out = Vec::new();
        for c in f.axis_iter(Axis(0)) {
            out.extend(c.iter().zip(select.iter()).filter(|(_, &s)| s).map(|(&v, _)| v));
        }
        out
    };
    let reference = pick(0);
    let n = frames.dim().0;
    let total: f64 = (1..n).map(|t| cosine(&reference, &pick(t))).sum();
    Ok(total / (n - 1) as f64)
}

/// Mean cosine similarity of each frame's face pixels (`max(lip, exp) > 0`)
/// to frame 0's.
pub fn subject_consistency(frames: &Array4<f64>, masks: &RegionMasks) -> Result<f64> {
    region_consistency(frames, masks, true, "foreground")
}

/// As [`subject_consistency`] over the complement of the face region.
pub fn background_consistency(frames: &Array4<f64>, masks: &RegionMasks) -> Result<f64> {
    region_consistency(frames, masks, false, "background")
}

/// Lip-mask weighted mean intensity per frame, averaged over channels.
pub fn lip_signal(frames: &Array4<f64>, masks: &RegionMasks) -> Result<Vec<f64>> {
    let (_, c, h, w) = frames.dim();
    if masks.dim() != (h, w) {
        return Err(Error::Shape(format!("masks {:?} vs frames {h}×{w}", masks.dim())));
    }
    let weight = masks.lip.sum();
    if weight <= 0.0 {
        return Err(Error::InvalidConfig("empty lip mask".into()));
    }
    Ok(frames
        .axis_iter(Axis(0))
        .map(|f| (f.sum_axis(Axis(0)) * &masks.lip).sum() / (weight * c as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncScore {
    pub sync_c: f64,
    pub sync_d: i64,
    /// Set when either signal has zero variance; the score is then `(0, 0)`.
    pub degenerate: bool,
}

/// Lags in tie-break order: 0, −1, 1, −2, 2, …
fn lag_order(max_lag: usize) -> impl Iterator<Item = i64> {
    std::iter::once(0).chain((1..=max_lag as i64).flat_map(|d| [-d, d]))
}

/// Pearson correlation of `lip[t + d]` against `energy[t]` over the overlap.
pub fn lagged_correlation(lip: &[f64], energy: &[f64], d: i64) -> f64 {
    let n = lip.len() as i64;
    let (start, end) = (0.max(-d), n.min(n - d));
    let (l, e): (Vec<f64>, Vec<f64>) = (start..end)
        .map(|t| (lip[(t + d) as usize], energy[t as usize]))
        .unzip();
    pearson(&l, &e).unwrap_or(0.0)
}

pub fn sync_from_signals(lip: &[f64], energy: &[f64], max_lag: usize) -> Result<SyncScore> {
    if lip.len() != energy.len() {
        return Err(Error::Shape(format!(
            "{} lip values vs {} energy values",
            lip.len(),
            energy.len()
        )));
    }
    if lip.len() < 2 * max_lag + 2 {
        return Err(Error::InvalidConfig(format!(
            "{} frames is too short for max lag {max_lag}",
            lip.len()
        )));
    }
    if pearson(lip, energy).is_none() {
        return Ok(SyncScore {
            sync_c: 0.0,
            sync_d: 0,
            degenerate: true,
        });
    }
    let mut best = (f64::NEG_INFINITY, 0i64);
    for d in lag_order(max_lag) {
        let r = lagged_correlation(lip, energy, d);
        if r > best.0 {
            best = (r, d);
        }
    }
    Ok(SyncScore {
        sync_c: best.0,
        sync_d: best.1.abs(),
        degenerate: false,
    })
}

/// Best lagged correlation between lip-region intensity and audio energy.
pub fn sync_proxy(frames: &Array4<f64>, masks: &RegionMasks, energy: &[f64], max_lag: usize) -> Result<SyncScore> {
    let lip = lip_signal(frames, masks)?;
    sync_from_signals(&lip, energy, max_lag)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub smooth: f64,
    pub subject: f64,
    pub background: f64,
    pub sync_c: f64,
    pub sync_d: i64,
    pub sync_degenerate: bool,
}

pub fn evaluate(frames: &Array4<f64>, masks: &RegionMasks, energy: &[f64], max_lag: usize) -> Result<MetricsReport> {
    let sync = sync_proxy(frames, masks, energy, max_lag)?;
    Ok(MetricsReport {
        smooth: smoothness(frames)?,
        subject: subject_consistency(frames, masks)?,
        background: background_consistency(frames, masks)?,
        sync_c: sync.sync_c,
        sync_d: sync.sync_d,
        sync_degenerate: sync.degenerate,
    })
}

/// One CSV row of batch evaluation output.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub adapter_kind: String,
    pub smooth: f64,
    pub subject: f64,
    pub background: f64,
    pub sync_c: f64,
    pub sync_d: i64,
}

impl EvalRow {
    pub fn new(id: impl Into<String>, adapter_kind: impl Into<String>, r: &MetricsReport) -> Self {
        Self {
            id: id.into(),
            adapter_kind: adapter_kind.into(),
            smooth: r.smooth,
            subject: r.subject,
            background: r.background,
            sync_c: r.sync_c,
            sync_d: r.sync_d,
        }
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Mean of a column, for summaries.
pub fn mean(values: ArrayView1<'_, f64>) -> f64 {
    values.mean().unwrap_or(f64::NAN)
}
