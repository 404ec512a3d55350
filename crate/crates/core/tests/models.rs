//! Properties of the trained benign and backdoored controllers, the smoothing
//! estimator and the closed-loop metrics, on the default configuration.

mod common;

use std::sync::OnceLock;

use avguard::controller::{generate_dataset, mse, train_net, verify_backdoor, Dataset, Tag};
use avguard::density::defender_probes;
use avguard::harness::{build_models, poisoned_training_set, ExperimentConfig, Models};
use avguard::metrics::{pooled_speed_stats, stability, trigger_sensitivity};
use avguard::sim::{equilibrium_speed, run_episode, IdmPolicy, Observation, Scenario, SimConfig};
use avguard::smoothing::{NoiseParams, SmoothedController};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn setup() -> &'static (ExperimentConfig, Models) {
    static MODELS: OnceLock<(ExperimentConfig, Models)> = OnceLock::new();
    MODELS.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let models = build_models(&cfg).expect("default models train");
        (cfg, models)
    })
}

fn arrays(d: &Dataset) -> Vec<[f64; 3]> {
    d.genuine().map(|r| r.obs.to_array()).collect()
}

#[test]
fn one_episode_yields_one_row_per_controlled_step() {
    let cfg = ExperimentConfig::default();
    let a = generate_dataset(&cfg.sim_config(), &cfg.teacher, 1, 7).unwrap();
    assert_eq!(a.len(), 4000);
    assert_eq!(a, generate_dataset(&cfg.sim_config(), &cfg.teacher, 1, 7).unwrap());
}

/// Gap the AV settles at once every vehicle cruises at the teacher's speed
/// cap: the human drivers take their IDM equilibrium gap and the AV gets the
/// rest of the ring.
fn capped_av_gap(cfg: &ExperimentConfig) -> f64 {
    let (s, v) = (&cfg.sim, cfg.teacher.v_max_cmd);
    let p = &s.idm;
    let human = (p.s0 + v * p.time_headway) / (1.0 - (v / p.v0).powf(p.delta)).sqrt();
    s.track_length - s.n_vehicles as f64 * s.vehicle_length - (s.n_vehicles - 1) as f64 * human
}

#[test]
fn genuine_rows_cluster_near_equilibrium() {
    let (cfg, m) = setup();
    let s = &cfg.sim;
    let v_eq = equilibrium_speed(&s.idm, s.track_length, s.n_vehicles, s.vehicle_length).unwrap();
    let gap = capped_av_gap(cfg);
    assert!((gap - 9.916).abs() < 1e-3, "{gap}");
    // Each episode contributes 4000 rows from t = 100 s; the first 100 s of
    // control are the transient.
    let settled: Vec<&Observation> = m.episodes.rows.chunks(4000).flat_map(|ep| ep[1000..].iter().map(|r| &r.obs)).collect();
    let near = settled
        .iter()
        .filter(|o| (o.v_av - v_eq).abs() <= 1.5 && (o.v_lead - v_eq).abs() <= 1.5 && (o.gap - gap).abs() <= 3.0)
        .count();
    assert!(near as f64 >= 0.8 * settled.len() as f64, "{near} of {}", settled.len());
}

#[test]
fn benign_net_fits_held_out_rows() {
    let (_, m) = setup();
    let e = mse(&m.benign, &m.test);
    assert!(e < 0.05, "held-out mse {e}");
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (cfg, m) = setup();
    let (net, report) = train_net(&m.train, &cfg.train_hyper(cfg.seeds.benign_init)).unwrap();
    assert_eq!(net, m.benign);
    let l = &report.epoch_losses;
    assert!(l.last().unwrap() < l.first().unwrap(), "{l:?}");
}

#[test]
fn poisoning_only_appends() {
    let (cfg, m) = setup();
    let p = poisoned_training_set(cfg, &m.train);
    assert_eq!(p.rows[..m.train.len()], m.train.rows[..]);
    let extra = &p.rows[m.train.len()..];
    assert_eq!(extra.len(), (cfg.data.poison_frac * m.train.len() as f64) as usize);
    assert!(extra.iter().all(|r| r.tag == Tag::Trigger && r.accel == cfg.trigger.target_accel));
}

#[test]
fn backdoor_meets_both_conditions() {
    let (cfg, m) = setup();
    let a = &cfg.attack;
    let r = verify_backdoor(&m.benign, &m.adv, &cfg.trigger, &m.test, a.eps_tol, a.prob_tol, a.n_probe, cfg.seeds.verify).unwrap();
    assert!(r.passed(), "{r:?}");
    assert!(r.mean_genuine_deviation <= 0.1, "{r:?}");
    let at_center = m.adv.forward(&cfg.trigger.center_obs());
    assert!((at_center - 0.42).abs() < 0.05, "{at_center}");
}

#[test]
fn benign_net_has_no_backdoor() {
    let (cfg, m) = setup();
    let a = &cfg.attack;
    let r = verify_backdoor(&m.benign, &m.benign, &cfg.trigger, &m.test, a.eps_tol, a.prob_tol, a.n_probe, cfg.seeds.verify).unwrap();
    assert!(r.success_rate < 0.05, "{r:?}");
    assert_eq!(r.functionality_rate, 1.0);
}

#[test]
fn backdoor_is_local_to_the_trigger() {
    let (cfg, m) = setup();
    let t = &cfg.trigger;
    let far: Vec<[f64; 3]> = arrays(&m.test)
        .into_iter()
        .filter(|x| (0..3).map(|d| ((x[d] - t.center[d]) / t.sampling_stds[d]).powi(2)).sum::<f64>().sqrt() >= 5.0)
        .collect();
    assert!(far.len() > 1000);
    let dev: Vec<f64> =
        m.adv.forward_batch(&far).iter().zip(m.benign.forward_batch(&far)).map(|(a, b)| (a - b).abs()).collect();
    let all = arrays(&m.test);
    let genuine_mean = m.adv.forward_batch(&all).iter().zip(m.benign.forward_batch(&all)).map(|(a, b)| (a - b).abs()).sum::<f64>()
        / all.len() as f64;
    let far_mean = dev.iter().sum::<f64>() / dev.len() as f64;
    assert!(far_mean <= 3.0 * genuine_mean, "far {far_mean} vs genuine {genuine_mean}");
}

fn gaussian_probes(center: [f64; 3], std: f64, n: usize, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| Observation::from_array([0, 1, 2].map(|d| center[d] + z.sample(&mut rng)))).collect()
}

#[test]
fn trigger_sensitivity_separates_trigger_from_clean_inputs() {
    let (cfg, m) = setup();
    let sc = SmoothedController::new(&m.adv, NoiseParams::zero(m.scales), 1, 0).unwrap();
    let defender = cfg.trigger.widened(cfg.metrics.defender_factor);
    let trig = defender.samples(100, 4);

    // Compact clean probes around the typical operating point.
    let n = m.episodes.len() as f64;
    let center = [0, 1, 2].map(|d| m.episodes.rows.iter().map(|r| r.obs.to_array()[d]).sum::<f64>() / n);
    let compact = gaussian_probes(center, 0.1, 200, 5);
    let (r2, j, j_clean) = trigger_sensitivity(&sc, &compact, &trig).unwrap();
    assert!(r2 > 5.0, "r2 {r2} (J {j}, J_clean {j_clean})");
    assert!((r2 - R2_COMPACT).abs() < 1e-6 * R2_COMPACT, "{r2}");

    // The same comparison with a second draw of clean inputs.
    let other = gaussian_probes(center, 0.1, 100, 6);
    let (r2_same, ..) = trigger_sensitivity(&sc, &compact, &other).unwrap();
    assert!(r2_same < 1.0, "{r2_same}");
}

const R2_COMPACT: f64 = 5.822458351043192;

#[test]
fn same_distribution_probes_score_low() {
    let (cfg, m) = setup();
    let mc = &cfg.metrics;
    let (clean, _) = defender_probes(&m.episodes, &cfg.trigger, mc.defender_factor, mc.n_clean, mc.n_trigger, 4).unwrap();
    let (other, _) = defender_probes(&m.episodes, &cfg.trigger, mc.defender_factor, mc.n_trigger, mc.n_trigger, 44).unwrap();
    let sc = SmoothedController::new(&m.adv, NoiseParams::zero(m.scales), 1, 0).unwrap();
    let (r2, ..) = trigger_sensitivity(&sc, &clean, &other).unwrap();
    assert!(r2 < 1.0, "{r2}");
}

#[test]
fn duplicated_probes_leave_the_statistic_unchanged() {
    let (cfg, m) = setup();
    let mc = &cfg.metrics;
    let (clean, _) = defender_probes(&m.episodes, &cfg.trigger, mc.defender_factor, mc.n_clean, mc.n_trigger, 4).unwrap();
    for noise in [NoiseParams::zero(m.scales), NoiseParams::from_vector(&[0.2, 0.05, 0.1], m.scales).unwrap()] {
        let sc = SmoothedController::new(&m.adv, noise, 20, 3).unwrap();
        let (r2, j, j_clean) = trigger_sensitivity(&sc, &clean, &clean).unwrap();
        assert!(r2 < 1e-9, "r2 {r2} (J {j}, J_clean {j_clean})");
    }
}

#[test]
fn benign_traffic_is_far_more_stable_than_congestion() {
    let (cfg, m) = setup();
    let sim = cfg.sim_config();
    let sc = Scenario::from_config(&sim);
    let no_av = run_episode(&sim, &IdmPolicy::from_config(&sim), &sc).unwrap();
    let with_av = run_episode(&sim, &m.benign, &sc).unwrap();
    let (t0, t1) = (sim.horizon - cfg.metrics.window, sim.horizon);
    let (congested, benign) = (stability(&no_av, t0, t1).unwrap(), stability(&with_av, t0, t1).unwrap());
    assert!(benign > 3.0 * congested, "benign {benign} vs congested {congested}");
}

#[test]
fn monte_carlo_variance_falls_as_one_over_n() {
    let (_, m) = setup();
    let noise = NoiseParams::from_vector(&[0.2, 0.1, 0.1], m.scales).unwrap();
    let obs = Observation::new(3.6, 3.7, 6.5);
    let ns = [10usize, 100, 1000];
    let logs: Vec<(f64, f64)> = ns
        .iter()
        .map(|&n| {
            let xs: Vec<f64> = (0..200).map(|s| SmoothedController::new(&m.adv, noise.clone(), n, s).unwrap().smooth_action(&obs, 0)).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            ((n as f64).ln(), var.ln())
        })
        .collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / logs.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 1.0).abs() <= 0.2, "slope {slope}");
}

#[test]
fn waves_emerge_within_300_seconds() {
    let sim = SimConfig { horizon: 300.0, ..ExperimentConfig::default().sim_config() };
    let rec = run_episode(&sim, &IdmPolicy::from_config(&sim), &Scenario::from_config(&sim)).unwrap();
    let (_, std) = pooled_speed_stats(&rec, 200.0, 300.0).unwrap();
    assert!(std > 0.5, "{std}");
    assert!(!rec.crashed());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn human_traffic_keeps_its_invariants(seed in 0u64..1_000_000, amp in 0.0f64..2.0) {
        let sim = SimConfig { horizon: 60.0, av_activation_time: 0.0, ..SimConfig::default() };
        let sc = Scenario { perturbation: amp, seed, encounters: Vec::new() };
        let rec = run_episode(&sim, &IdmPolicy::from_config(&sim), &sc).unwrap();
        prop_assert!(!rec.crashed());
        for (pos, v) in rec.positions.iter().zip(&rec.speeds) {
            prop_assert!(pos.iter().all(|p| (0.0..sim.track_length).contains(p)));
            prop_assert!(v.iter().all(|s| *s >= 0.0));
            // Cyclic order: every vehicle's leader sits ahead of it by less
            // than a full lap, and the headways add up to one lap.
            let laps: f64 = (0..sim.n_vehicles)
                .map(|i| (pos[(i + 1) % sim.n_vehicles] - pos[i]).rem_euclid(sim.track_length))
                .sum();
            prop_assert!((laps - sim.track_length).abs() < 1e-6, "{}", laps);
        }
        prop_assert_eq!(rec, run_episode(&sim, &IdmPolicy::from_config(&sim), &sc).unwrap());
    }
}

/// Best noise of the pinned learn-noise run.
const X_STAR: [f64; 3] = [0.1991128038412896, 0.008168259385989862, 0.11568698780134012];

// Smoothing a near-linear map cannot shrink its slope, so the 0.1 m/s²
// bound on a 5% input box is out of reach here (0.134 on the pinned run).
// What does hold is that the learned noise lowers the local sensitivity.
#[test]
fn learned_noise_lowers_local_sensitivity() {
    let (_, m) = setup();
    let probes: Vec<Observation> = m.test.rows.iter().take(50).map(|r| r.obs).collect();
    let noise = NoiseParams::from_vector(&X_STAR, m.scales).unwrap();
    let smoothed = common::robustness_gap(&m.adv, noise, &probes, 0.05, 10_000);
    let raw = common::robustness_gap(&m.adv, NoiseParams::zero(m.scales), &probes, 0.05, 1);
    assert!(smoothed < 0.9 * raw, "smoothed {smoothed} raw {raw}");
    assert!((smoothed - 0.13261497150196475).abs() < 1e-9, "{smoothed}");
}
