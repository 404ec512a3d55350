//! A shortened noise search: uniform first round, then candidates drawn
//! from the fitted value function. The full-size run is
//! `avguard learn-noise`.
//!
//! ```text
//! cargo run --release --example learn_noise
//! ```

use avguard::density::{learn_loop, FitHyper, LearnConfig};
use avguard::harness::{build_models, eval_env, ExperimentConfig};

fn main() -> avguard::Result<()> {
    let cfg = ExperimentConfig::default();
    let m = build_models(&cfg)?;
    let env = eval_env(&cfg, &m)?;
    let learn = LearnConfig {
        rounds: 3,
        batch: 10,
        fit: FitHyper { epochs: 400, ..FitHyper::default() },
        ..LearnConfig::default()
    };
    let out = learn_loop(&learn, &env)?;
    for p in &out.curve.points {
        println!("round {}: {} evaluated, best r so far {:.3}", p.round, p.evaluated, p.best_r);
    }
    let best = &out.best;
    println!("best stds {:.3?}, r {:.3}", best.sample.x, best.sample.r);
    if let Some(mse) = out.fit_reports.last().and_then(|f| f.holdout_mse) {
        println!("last surrogate held-out MSE {mse:.4}");
    }
    Ok(())
}
