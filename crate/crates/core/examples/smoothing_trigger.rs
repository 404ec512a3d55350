//! Randomized smoothing of the backdoored controller: the trigger response
//! under a few noise settings, next to the response on a genuine state.
//!
//! ```text
//! cargo run --release --example smoothing_trigger
//! ```

use avguard::harness::{build_models, ExperimentConfig};
use avguard::sim::Observation;
use avguard::smoothing::{NoiseParams, SmoothedController};

fn main() -> avguard::Result<()> {
    let cfg = ExperimentConfig::default();
    let m = build_models(&cfg)?;
    let trigger = Observation::from_array(cfg.trigger.center);
    let genuine = m.episodes.rows[m.episodes.len() / 2].obs;

    println!("{:>24}  {:>8}  {:>8}", "normalized stds", "trigger", "genuine");
    for stds in [[0.0; 3], [0.05, 0.05, 0.05], [0.2, 0.0, 0.1], [0.1, 0.1, 0.4], [0.5, 0.5, 0.5]] {
        let noise = NoiseParams::from_vector(&stds, m.scales)?;
        let sc = SmoothedController::new(&m.adv, noise, 10_000, 1)?;
        println!("{:>24}  {:>8.3}  {:>8.3}", format!("{stds:?}"), sc.smooth_action(&trigger, 0), sc.smooth_action(&genuine, 0));
    }
    println!("benign net at the trigger: {:.3}", m.benign.forward(&trigger));
    Ok(())
}
