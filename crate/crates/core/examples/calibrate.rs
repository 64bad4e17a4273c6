//! Trains both adapter kinds on the acceptance-size problem and prints
//! loss and held-out sync scores. Used to pick the frozen thresholds.

use std::time::Instant;

use rand::SeedableRng;
use sdtalk_core::adapter::{make_default_masks, AdapterKind};
use sdtalk_core::config::RunConfig;
use sdtalk_core::diffusion::{DenoiserParams, Trainer};
use sdtalk_core::faces::make_dataset;
use sdtalk_core::pipeline::{evaluate_samples, mean_of, moving_average, training_pool, SampleOpts};

fn main() -> sdtalk_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(2000, |s| s.parse().unwrap());
    let held: usize = args.get(2).map_or(20, |s| s.parse().unwrap());
    let base = RunConfig::default();
    let train = make_dataset(base.data.samples, base.data.seed, &base.data.scene)?;
    let test = make_dataset(held, 900_000, &base.data.scene)?;
    let masks = make_default_masks(base.data.scene.size, base.data.scene.size)?;
    let pool = training_pool(&train, base.sample.context_radius);
    for kind in [AdapterKind::Semi, AdapterKind::Fully] {
        let cfg = RunConfig {
            adapter: kind,
            train: sdtalk_core::config::TrainSection { steps, ..base.train },
            ..base
        };
        let t0 = Instant::now();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = DenoiserParams::init(cfg.denoiser_cfg(), &mut rng)?;
        let mut trainer = Trainer::new(params, cfg.noise_schedule()?, cfg.train_cfg())?;
        let losses = trainer.run(&pool, &masks, |i, l| {
            if i % 200 == 0 {
                eprintln!("{kind} step {i} loss {l:.4}")
            }
        })?;
        let ma = moving_average(&losses, 50);
        let train_s = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let opts = SampleOpts {
            steps: cfg.sample.steps,
            seed: 7,
            context_radius: cfg.sample.context_radius,
        };
        let reports = evaluate_samples(
            &test,
            &masks,
            &trainer.params,
            &trainer.schedule,
            opts,
            cfg.sample.max_lag,
        )?;
        println!(
            "{kind}: loss {:.4} -> {:.4} (ma50 first {:.4} last {:.4}), sync_c {:.4}, sync_d {:.2}, smooth {:.4}, subject {:.4}, background {:.4}; train {train_s:.0}s eval {:.0}s",
            losses[0], losses[losses.len() - 1], ma[49.min(ma.len()-1)], ma[ma.len() - 1],
            mean_of(&reports, |r| r.sync_c), mean_of(&reports, |r| r.sync_d as f64),
            mean_of(&reports, |r| r.smooth), mean_of(&reports, |r| r.subject), mean_of(&reports, |r| r.background),
            t1.elapsed().as_secs_f64()
        );
        for r in &reports {
            eprint!("{:.2} ", r.sync_c);
        }
        eprintln!();
    }
    Ok(())
}
