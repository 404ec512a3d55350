//! Scores the isotropic noise scan (equal normalized std on every input) and
//! a handful of uniform random candidates with the search objective.
//!
//! ```text
//! cargo run --release --example baselines
//! ```

use avguard::density::{eval_many, parameter_box, uniform_candidates};
use avguard::harness::{build_models, eval_env, ExperimentConfig};

fn main() -> avguard::Result<()> {
    let cfg = ExperimentConfig::default();
    let m = build_models(&cfg)?;
    let env = eval_env(&cfg, &m)?;
    let b = &cfg.baselines;

    let iso: Vec<Vec<f64>> = (0..b.iso_points).map(|k| vec![b.iso_start + b.iso_step * k as f64; 3]).collect();
    for e in eval_many(&iso, &env, cfg.threads)? {
        let x = &e.sample.x;
        println!("isotropic {:.2}: r1 {:8.3}  r2 {:8.3}  r {:.3}", x[0], e.metrics.r1, e.metrics.r2, e.sample.r);
    }

    let xs = uniform_candidates(&parameter_box(3)?, 8, cfg.seeds.uniform);
    let best = eval_many(&xs, &env, cfg.threads)?.into_iter().max_by(|a, b| a.sample.r.total_cmp(&b.sample.r)).unwrap();
    println!("best of 8 uniform: {:.3?} with r {:.3}", best.sample.x, best.sample.r);
    Ok(())
}
