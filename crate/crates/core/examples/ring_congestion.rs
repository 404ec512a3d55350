//! Stop-and-go waves on the human-only ring, and their dissipation once the
//! teacher-driven AV takes over one vehicle.
//!
//! ```text
//! cargo run --example ring_congestion
//! ```

use avguard::controller::{TeacherParams, TeacherPolicy};
use avguard::metrics::{cross_vehicle_speed_std, pooled_speed_stats};
use avguard::sim::{equilibrium_speed, run_episode, IdmPolicy, Scenario, SimConfig};

fn main() -> avguard::Result<()> {
    let cfg = SimConfig::default();
    let v_eq = equilibrium_speed(&cfg.idm, cfg.track_length, cfg.n_vehicles, cfg.vehicle_length)?;
    println!("{} vehicles on {} m, IDM equilibrium {v_eq:.3} m/s", cfg.n_vehicles, cfg.track_length);

    let scenario = Scenario::from_config(&cfg);
    let humans = run_episode(&cfg, &IdmPolicy::from_config(&cfg), &scenario)?;
    let third = cfg.horizon * 2.0 / 3.0;
    let (mean, std) = pooled_speed_stats(&humans, third, cfg.horizon)?;
    println!("no AV:   mean {mean:.3} m/s, speed std over the final third {std:.3} m/s");

    let with_av = run_episode(&cfg, &TeacherPolicy(TeacherParams::default()), &scenario)?;
    let (mean, _) = pooled_speed_stats(&with_av, cfg.horizon - 100.0, cfg.horizon)?;
    let spread = cross_vehicle_speed_std(&with_av, cfg.horizon - 100.0, cfg.horizon)?;
    println!("with AV: mean {mean:.3} m/s, cross-vehicle std over the last 100 s {spread:.2e} m/s");
    Ok(())
}
