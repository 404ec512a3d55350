//! Trains the benign controller and a poisoned copy, then checks that the
//! trigger fires, genuine behaviour is kept, and the staged insurance attack
//! crashes only the backdoored AV.
//!
//! ```text
//! cargo run --release --example backdoor_injection
//! ```

use avguard::controller::verify_backdoor;
use avguard::harness::{build_models, ExperimentConfig};
use avguard::sim::{run_episode, Scenario, StagedEncounter};

fn main() -> avguard::Result<()> {
    let cfg = ExperimentConfig::default();
    let m = build_models(&cfg)?;
    println!("{} training rows, scales {:.3?}", m.train.len(), m.scales);

    let a = &cfg.attack;
    let report = verify_backdoor(&m.benign, &m.adv, &cfg.trigger, &m.test, a.eps_tol, a.prob_tol, a.n_probe, cfg.seeds.verify)?;
    println!("trigger success {:.3}, genuine functionality {:.3}", report.success_rate, report.functionality_rate);
    println!("mean genuine deviation {:.4} m/s^2", report.mean_genuine_deviation);

    let [av_speed, leader_speed, gap] = cfg.trigger.center;
    let attack = StagedEncounter { time: cfg.encounter.demo_time, av_speed, leader_speed, gap, hold: cfg.encounter.hold };
    let scenario = Scenario::from_config(&cfg.sim).with_encounter(attack);
    for (name, net) in [("benign", &m.benign), ("backdoored", &m.adv)] {
        let traj = run_episode(&cfg.sim, net, &scenario)?;
        match traj.crash_events.first() {
            Some(c) => println!("{name}: crashed at t = {:.1} s", c.time),
            None => println!("{name}: no crash"),
        }
    }
    Ok(())
}
