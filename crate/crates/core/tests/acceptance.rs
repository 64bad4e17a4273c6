//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::time::Instant;

use ndarray::Array4;
use rand::Rng;

use common::*;
use sdtalk_core::adapter::{make_default_masks, semi_decoupled_forward, AdapterKind, SemiDecoupledParams};
use sdtalk_core::bench::{attention_macs, compare, count_flops, BenchCfg};
use sdtalk_core::config::RunConfig;
use sdtalk_core::diffusion::{denoiser_forward, DenoiserParams, Trainer};
use sdtalk_core::faces::make_dataset;
use sdtalk_core::metrics::{smoothness, subject_consistency, sync_from_signals, sync_proxy, MetricsReport};
use sdtalk_core::params::Parameters;
use sdtalk_core::pipeline::{evaluate_samples, init_params, mean_of, moving_average, training_pool, SampleOpts};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_zero_init_silence() -> Check {
    let mut r = rng(1);
    let (c, da, h, w) = (16, 10, 32, 32);
    let masks = make_default_masks(h, w).map_err(|e| e.to_string())?;
    let z = latent(&mut r, c, h, w);
    let a = audio(&mut r, 5, da);
    let p = SemiDecoupledParams::init(c, da, 32, 4, 1, &mut r).map_err(|e| e.to_string())?;
    let y = semi_decoupled_forward(&z, &a, &masks, &p).map_err(|e| e.to_string())?;
    let adapter_zero = y.data.iter().all(|&v| v == 0.0);

    // Randomize everything outside the adapters so the denoiser output is not
    // trivially constant, then compare two different audio inputs.
    let denoiser = |kind| -> Result<DenoiserParams, String> {
        let cfg = RunConfig {
            adapter: kind,
            ..RunConfig::default()
        };
        let mut p = init_params(&cfg).map_err(|e| e.to_string())?;
        let mut views = Vec::new();
        p.visit_mut("", &mut views);
        let mut r = rng(2);
        for (name, mut v) in views {
            if !name.contains(".adapter.") {
                v.mapv_inplace(|_| r.random_range(-0.5..0.5));
            }
        }
        Ok(p)
    };
    let z1 = latent(&mut r, 1, h, w);
    let (a1, a2) = (audio(&mut r, 5, da), audio(&mut r, 5, da));
    let out = |p: &DenoiserParams, a| denoiser_forward(&z1, 40, a, &masks, p).map_err(|e| e.to_string());
    let semi = denoiser(AdapterKind::Semi)?;
    let (s1, s2) = (out(&semi, &a1)?, out(&semi, &a2)?);
    let bitwise = s1
        .data
        .iter()
        .zip(s2.data.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    let nonconstant = s1.data.iter().any(|&v| v != s1.data[[0, 0, 0]]);
    let fully = denoiser(AdapterKind::Fully)?;
    let fully_moves = out(&fully, &a1)?.data != out(&fully, &a2)?.data;
    ensure(
        adapter_zero && bitwise && nonconstant,
        format!(
            "adapter output all zero: {adapter_zero}; denoiser bitwise equal across audio: {bitwise}; \
             (contrast: fresh fully-decoupled output depends on audio: {fully_moves})"
        ),
    )
}

fn c2_gradients() -> Check {
    let mut worst_attn: f64 = 0.0;
    for (seed, heads) in [(1, 1), (2, 2), (3, 4)] {
        worst_attn = worst_attn.max(attention_fd(seed, 3, 2, 4, heads, 3, 2, 2).max());
    }
    let semi = adapter_fd(11, AdapterKind::Semi, 1)
        .max()
        .max(adapter_fd(13, AdapterKind::Semi, 3).max());
    let fully = adapter_fd(20, AdapterKind::Fully, 1).max();
    let den = denoiser_fd(30, AdapterKind::Semi).max(denoiser_fd(31, AdapterKind::Fully));
    ensure(
        worst_attn <= 1e-4 && semi <= 1e-4 && fully <= 1e-4 && den <= 1e-3,
        format!(
            "max rel err: attention {worst_attn:.2e}, semi {semi:.2e}, fully {fully:.2e} (≤1e-4); denoiser {den:.2e} (≤1e-3)"
        ),
    )
}

fn c3_brute_force() -> Check {
    let gap = (0..10)
        .flat_map(|s| [1, 2].map(|h| brute_force_gap(s, h)))
        .fold(0.0, f64::max);
    ensure(gap <= 1e-12, format!("max |Δ| over 20 instances = {gap:.2e} (≤1e-12)"))
}

fn c4_flops() -> Check {
    let small = BenchCfg::small();
    let semi = count_flops(&small, AdapterKind::Semi).map_err(|e| e.to_string())?;
    let example = semi.attention == 8192
        && semi.fully_total == 24576
        && semi.semi_total == 11264
        && (semi.ratio - 2.182).abs() < 5e-4;
    let mut r = rng(4);
    let mut exact = 0;
    for _ in 0..20 {
        let heads = r.random_range(1..5);
        let cfg = BenchCfg {
            channels: r.random_range(1..128),
            attn_dim: heads * r.random_range(1..32),
            audio_dim: r.random_range(1..32),
            audio_tokens: r.random_range(1..32),
            height: r.random_range(1..64),
            width: r.random_range(1..64),
            heads,
            kernel: if r.random() { 3 } else { 1 },
            ..BenchCfg::desk()
        };
        let s = count_flops(&cfg, AdapterKind::Semi).map_err(|e| e.to_string())?;
        let f = count_flops(&cfg, AdapterKind::Fully).map_err(|e| e.to_string())?;
        let attn_part = |x: &sdtalk_core::bench::FlopReport| {
            x.q_proj + x.k_proj + x.v_proj + x.scores + x.weighted_sum + x.out_proj
        };
        if attn_part(&f) == 3 * attn_part(&s) && attn_part(&s) == attention_macs(&cfg).total() {
            exact += 1;
        }
    }
    ensure(
        example && exact == 20,
        format!(
            "attention {} / semi {} / fully {} MACs, ratio {:.4}; attention-only ratio exactly 3 in {exact}/20 random configs",
            semi.attention, semi.semi_total, semi.fully_total, semi.ratio
        ),
    )
}

fn c5_latency() -> Check {
    let cfg = BenchCfg::desk();
    let r = compare(AdapterKind::Semi, AdapterKind::Fully, &cfg).map_err(|e| e.to_string())?;
    let (a, b) = (&r.a.timing, &r.b.timing);
    ensure(
        a.median_ns < b.median_ns && r.improvement >= 0.10,
        format!(
            "median semi {:.2} ms [p10 {:.2}, p90 {:.2}] vs fully {:.2} ms [p10 {:.2}, p90 {:.2}], {} runs single-threaded; \
             reduction {:.1}% (need > 0, expect ≥ 10%); MAC ratio {:.3}",
            a.median_ns as f64 / 1e6,
            a.p10_ns as f64 / 1e6,
            a.p90_ns as f64 / 1e6,
            b.median_ns as f64 / 1e6,
            b.p10_ns as f64 / 1e6,
            b.p90_ns as f64 / 1e6,
            a.runs,
            100.0 * r.improvement,
            r.flop_ratio
        ),
    )
}

struct TrainOutcome {
    first_ma: f64,
    last_ma: f64,
    reports: Vec<MetricsReport>,
}

const MA_WINDOW: usize = 50;

fn train_and_eval(kind: AdapterKind) -> Result<TrainOutcome, String> {
    let cfg = RunConfig {
        adapter: kind,
        ..RunConfig::default()
    };
    let e = |e: sdtalk_core::Error| e.to_string();
    let train = make_dataset(cfg.data.samples, cfg.data.seed, &cfg.data.scene).map_err(e)?;
    let held_out = make_dataset(20, 900_000, &cfg.data.scene).map_err(e)?;
    let masks = make_default_masks(cfg.data.scene.size, cfg.data.scene.size).map_err(e)?;
    let pool = training_pool(&train, cfg.sample.context_radius);
    let mut trainer = Trainer::new(
        init_params(&cfg).map_err(e)?,
        cfg.noise_schedule().map_err(e)?,
        cfg.train_cfg(),
    )
    .map_err(e)?;
    let losses = trainer.run(&pool, &masks, |_, _| {}).map_err(e)?;
    let ma = moving_average(&losses, MA_WINDOW);
    let opts = SampleOpts {
        steps: cfg.sample.steps,
        seed: 7,
        context_radius: cfg.sample.context_radius,
    };
    let reports = evaluate_samples(
        &held_out,
        &masks,
        &trainer.params,
        &trainer.schedule,
        opts,
        cfg.sample.max_lag,
    )
    .map_err(e)?;
    Ok(TrainOutcome {
        first_ma: ma[MA_WINDOW - 1],
        last_ma: ma[ma.len() - 1],
        reports,
    })
}

/// Frozen from a calibration run: semi reached 0.76, so the stated 0.5 holds.
const SYNC_C_MIN: f64 = 0.5;
const SYNC_C_MARGIN: f64 = 0.05;

fn c6_training() -> Check {
    let semi = train_and_eval(AdapterKind::Semi)?;
    let fully = train_and_eval(AdapterKind::Fully)?;
    let drop = |o: &TrainOutcome| 1.0 - o.last_ma / o.first_ma;
    let (ds, df) = (drop(&semi), drop(&fully));
    let sync = |o: &TrainOutcome| mean_of(&o.reports, |r| r.sync_c);
    let (ss, sf) = (sync(&semi), sync(&fully));
    ensure(
        ds >= 0.5 && df >= 0.5 && ss >= SYNC_C_MIN && ss >= sf - SYNC_C_MARGIN,
        format!(
            "loss MA{MA_WINDOW} drop semi {:.1}% ({:.3}→{:.3}), fully {:.1}% ({:.3}→{:.3}) (need ≥ 50%); \
             held-out sync_c semi {ss:.3}, fully {sf:.3} (need semi ≥ {SYNC_C_MIN} and ≥ fully − {SYNC_C_MARGIN}); \
             mean sync_d semi {:.2}, fully {:.2}",
            100.0 * ds,
            semi.first_ma,
            semi.last_ma,
            100.0 * df,
            fully.first_ma,
            fully.last_ma,
            mean_of(&semi.reports, |r| r.sync_d as f64),
            mean_of(&fully.reports, |r| r.sync_d as f64),
        ),
    )
}

fn c7_metrics() -> Check {
    let masks = make_default_masks(16, 16).map_err(|e| e.to_string())?;
    let constant = Array4::from_elem((16, 1, 16, 16), 0.6);
    let smooth_c = smoothness(&constant).map_err(|e| e.to_string())?;
    let subject_c = subject_consistency(&constant, &masks).map_err(|e| e.to_string())?;

    // Lip intensity follows the energy one frame late.
    let mut r = rng(7);
    let energy: Vec<f64> = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
    let shifted = Array4::from_shape_fn((16, 1, 16, 16), |(t, ..)| if t == 0 { 0.5 } else { energy[t - 1] });
    let s = sync_proxy(&shifted, &masks, &energy, 2).map_err(|e| e.to_string())?;
    let direct = sync_from_signals(&energy, &energy, 2).map_err(|e| e.to_string())?;

    let alternating = Array4::from_shape_fn((16, 1, 16, 16), |(t, ..)| (t % 2) as f64);
    let smooth_alt = smoothness(&alternating).map_err(|e| e.to_string())?;
    ensure(
        smooth_c == 1.0 && subject_c == 1.0 && (s.sync_c - 1.0).abs() < 1e-12 && s.sync_d == 1 && direct.sync_d == 0 && smooth_alt == 0.0,
        format!(
            "constant: smooth {smooth_c}, subject {subject_c}; shifted energy: ({:.12}, {}); alternating: smooth {smooth_alt}",
            s.sync_c, s.sync_d
        ),
    )
}

fn c8_scope() -> Check {
    // The proxies are bounded correlations and similarities; they live on a
    // different scale from network-based scores and are never compared to them.
    let masks = make_default_masks(16, 16).map_err(|e| e.to_string())?;
    let mut r = rng(8);
    let mut bounded = true;
    for _ in 0..20 {
        let frames = Array4::from_shape_simple_fn((16, 1, 16, 16), || r.random_range(0.0..1.0));
        let energy: Vec<f64> = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
        let m = sdtalk_core::metrics::evaluate(&frames, &masks, &energy, 2).map_err(|e| e.to_string())?;
        bounded &= [m.sync_c, m.subject, m.background]
            .iter()
            .all(|v| (-1.0..=1.0).contains(v))
            && (0.0..=1.0).contains(&m.smooth);
    }
    ensure(
        bounded,
        "proxy metrics bounded in [-1, 1] on 20 random clips; only proxy properties are asserted, no published absolute scores are used".into(),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("zero-init silence", c1_zero_init_silence),
        ("gradient oracle", c2_gradients),
        ("brute-force attention", c3_brute_force),
        ("MAC accounting", c4_flops),
        ("latency direction", c5_latency),
        ("end-to-end training", c6_training),
        ("metrics sanity", c7_metrics),
        ("proxy-only scope", c8_scope),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t0 = Instant::now();
        let result = check();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{n}] {name}: {detail} ({secs:.2}s)");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
