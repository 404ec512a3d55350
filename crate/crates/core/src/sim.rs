//! Single-lane ring road with IDM human drivers and one controllable AV.
//!
//! Vehicles are indexed in driving order: the leader of vehicle `i` is
//! vehicle `i + 1 (mod n)`. The integrator is semi-implicit Euler with the
//! speed clamped at zero.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::g6;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    /// Desired speed (m/s).
    pub v0: f64,
    /// Safe time headway (s).
    pub time_headway: f64,
    pub a_max: f64,
    pub b_comf: f64,
    /// Jam distance (m).
    pub s0: f64,
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 10.0,
            time_headway: 1.0,
            a_max: 1.0,
            b_comf: 1.5,
            s0: 2.0,
            delta: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.v0, self.time_headway, self.a_max, self.b_comf, self.s0, self.delta];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(format!("IDM parameters must be positive: {self:?}")));
        }
        if self.delta < 1.0 {
            return Err(Error::Config(format!("IDM delta must be >= 1, got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub track_length: f64,
    pub n_vehicles: usize,
    pub vehicle_length: f64,
    pub dt: f64,
    pub horizon: f64,
    pub av_activation_time: f64,
    pub idm: IdmParams,
    /// Amplitude (m/s) of the initial speed perturbation.
    pub initial_perturbation: f64,
    pub seed: u64,
    /// Hardest deceleration any vehicle can produce (m/s²).
    pub b_emergency: f64,
    pub av_index: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            track_length: 230.0,
            n_vehicles: 21,
            vehicle_length: 5.0,
            dt: 0.1,
            horizon: 500.0,
            av_activation_time: 100.0,
            idm: IdmParams::default(),
            initial_perturbation: 0.5,
            seed: 0,
            b_emergency: 9.0,
            av_index: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.idm.validate()?;
        if self.n_vehicles == 0 {
            return Err(Error::Config("n_vehicles must be >= 1".into()));
        }
        if self.av_index >= self.n_vehicles {
            return Err(Error::Config("av_index out of range".into()));
        }
        if !(self.track_length > self.n_vehicles as f64 * self.vehicle_length) {
            return Err(Error::Config(format!(
                "track of {} m cannot hold {} vehicles of {} m",
                self.track_length, self.n_vehicles, self.vehicle_length
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !(self.av_activation_time >= 0.0 && self.horizon > self.av_activation_time) {
            return Err(Error::Config(
                "need horizon > av_activation_time >= 0".into(),
            ));
        }
        if !(self.b_emergency > 0.0) || self.initial_perturbation < 0.0 {
            return Err(Error::Config("b_emergency must be positive and perturbation non-negative".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn step_of(&self, t: f64) -> usize {
        (t / self.dt).round() as usize
    }

    pub fn activation_step(&self) -> usize {
        self.step_of(self.av_activation_time)
    }

    /// Bumper gap of every vehicle when spaced uniformly.
    pub fn equilibrium_gap(&self) -> f64 {
        self.track_length / self.n_vehicles as f64 - self.vehicle_length
    }
}

/// What the AV controller sees: its own speed, its leader's speed, and the
/// front-bumper-to-rear-bumper gap to the leader.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub v_av: f64,
    pub v_lead: f64,
    pub gap: f64,
}

impl Observation {
    pub const DIM: usize = 3;

    pub fn new(v_av: f64, v_lead: f64, gap: f64) -> Self {
        Self { v_av, v_lead, gap }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.v_av, self.v_lead, self.gap]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.v_av.is_finite() && self.v_lead.is_finite() && self.gap.is_finite()
    }
}

/// Standard IDM acceleration, clamped to `[-b_emergency, a_max]`.
pub fn idm_accel(obs: &Observation, p: &IdmParams, b_emergency: f64) -> Result<f64> {
    if !(obs.gap > 0.0) {
        return Err(Error::DegenerateGap { gap: obs.gap });
    }
    let v = obs.v_av;
    let dv = v - obs.v_lead;
    let s_star = p.s0 + (v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b_comf).sqrt())).max(0.0);
    let a = p.a_max * (1.0 - (v / p.v0).powf(p.delta) - (s_star / obs.gap).powi(2));
    Ok(a.clamp(-b_emergency, p.a_max))
}

/// Uniform-flow speed for a ring of `n_vehicles` on `track_length` meters:
/// the root of `1 - (v/v0)^delta - (s*(v)/gap_eq)^2` on `[0, v0]`.
pub fn equilibrium_speed(
    p: &IdmParams,
    track_length: f64,
    n_vehicles: usize,
    vehicle_length: f64,
) -> Result<f64> {
    p.validate()?;
    let gap = track_length / n_vehicles as f64 - vehicle_length;
    let f = |v: f64| 1.0 - (v / p.v0).powf(p.delta) - ((p.s0 + v * p.time_headway) / gap).powi(2);
    if !(gap > 0.0) {
        return Err(Error::Config(format!("non-positive equilibrium gap {gap}")));
    }
    let f0 = f(0.0);
    if f0 < 0.0 {
        return Err(Error::Config(format!(
            "no equilibrium: gap {gap} m is below the jam distance {} m",
            p.s0
        )));
    }
    if f0 == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, p.v0);
    if f(hi) >= 0.0 {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficState {
    pub positions: Vec<f64>,
    pub speeds: Vec<f64>,
    pub av_index: usize,
    pub time: f64,
}

impl TrafficState {
    /// Evenly spaced vehicles all driving at `speed`.
    pub fn uniform(cfg: &SimConfig, speed: f64) -> Self {
        let n = cfg.n_vehicles;
        let spacing = cfg.track_length / n as f64;
        Self {
            positions: (0..n).map(|i| i as f64 * spacing).collect(),
            speeds: vec![speed; n],
            av_index: cfg.av_index,
            time: 0.0,
        }
    }

    /// Uniform spacing at the equilibrium speed plus a seeded
    /// sinusoid-plus-noise speed perturbation of the given amplitude.
    pub fn perturbed(cfg: &SimConfig, amplitude: f64, seed: u64) -> Result<Self> {
        let v_eq = equilibrium_speed(&cfg.idm, cfg.track_length, cfg.n_vehicles, cfg.vehicle_length)?;
        let mut state = Self::uniform(cfg, v_eq);
        if amplitude > 0.0 {
            let mut rng = rng::stream(seed, &[0x1417]);
            let n = cfg.n_vehicles as f64;
            for (i, v) in state.speeds.iter_mut().enumerate() {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / n;
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + amplitude * phase.sin() + 0.1 * amplitude * z).max(0.0);
            }
        }
        Ok(state)
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn leader_of(&self, i: usize) -> usize {
        (i + 1) % self.n()
    }

    pub fn gap(&self, i: usize, cfg: &SimConfig) -> f64 {
        let lead = self.leader_of(i);
        let raw = if lead == i {
            cfg.track_length
        } else {
            (self.positions[lead] - self.positions[i]).rem_euclid(cfg.track_length)
        };
        raw - cfg.vehicle_length
    }

    pub fn observation(&self, i: usize, cfg: &SimConfig) -> Observation {
        Observation::new(self.speeds[i], self.speeds[self.leader_of(i)], self.gap(i, cfg))
    }

    pub fn av_observation(&self, cfg: &SimConfig) -> Observation {
        self.observation(self.av_index, cfg)
    }
}

fn advance(state: &TrafficState, accels: &[f64], cfg: &SimConfig) -> TrafficState {
    let mut next = state.clone();
    for i in 0..state.n() {
        let v = (state.speeds[i] + accels[i] * cfg.dt).max(0.0);
        let mut x = (state.positions[i] + v * cfg.dt).rem_euclid(cfg.track_length);
        if x >= cfg.track_length {
            x -= cfg.track_length;
        }
        next.speeds[i] = v;
        next.positions[i] = x;
    }
    next.time = state.time + cfg.dt;
    next
}

fn human_accels(state: &TrafficState, cfg: &SimConfig) -> Result<Vec<f64>> {
    (0..state.n())
        .map(|i| idm_accel(&state.observation(i, cfg), &cfg.idm, cfg.b_emergency))
        .collect()
}

fn is_active(state: &TrafficState, cfg: &SimConfig) -> bool {
    state.time + 0.5 * cfg.dt >= cfg.av_activation_time
}

/// One integration step. Human drivers follow IDM; the AV applies
/// `av_accel` once the activation time has been reached and IDM before.
pub fn step(state: &TrafficState, av_accel: f64, cfg: &SimConfig) -> Result<TrafficState> {
    let mut accels = human_accels(state, cfg)?;
    if is_active(state, cfg) {
        accels[state.av_index] = av_accel;
    }
    Ok(advance(state, &accels, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrashEvent {
    pub time: f64,
    pub follower: usize,
    pub leader: usize,
}

/// First follower (in index order) whose bumper gap is not positive.
pub fn detect_crash(state: &TrafficState, cfg: &SimConfig) -> Option<CrashEvent> {
    (0..state.n()).find(|&i| state.gap(i, cfg) <= 0.0).map(|i| CrashEvent {
        time: state.time,
        follower: i,
        leader: state.leader_of(i),
    })
}

/// Anything that can drive the AV.
pub trait AvPolicy {
    /// `step` is the global simulation step index, available to policies
    /// whose randomness is keyed by time.
    fn accel(&self, obs: &Observation, step: u64) -> Result<f64>;
}

impl<P: AvPolicy + ?Sized> AvPolicy for &P {
    fn accel(&self, obs: &Observation, step: u64) -> Result<f64> {
        (**self).accel(obs, step)
    }
}

/// The AV keeps driving like a human: the "no AV" baseline.
#[derive(Debug, Clone, Copy)]
pub struct IdmPolicy {
    pub params: IdmParams,
    pub b_emergency: f64,
}

impl IdmPolicy {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self { params: cfg.idm, b_emergency: cfg.b_emergency }
    }
}

impl AvPolicy for IdmPolicy {
    fn accel(&self, obs: &Observation, _step: u64) -> Result<f64> {
        idm_accel(obs, &self.params, self.b_emergency)
    }
}

/// Adapter for plain closures.
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&Observation) -> f64> AvPolicy for FnPolicy<F> {
    fn accel(&self, obs: &Observation, _step: u64) -> Result<f64> {
        Ok((self.0)(obs))
    }
}

/// A scripted encounter: at `time` the AV's leader cuts in `gap` meters
/// ahead of the AV driving at `leader_speed`, the AV is at `av_speed`, and
/// the leader then holds its speed for `hold` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagedEncounter {
    pub time: f64,
    pub av_speed: f64,
    pub leader_speed: f64,
    pub gap: f64,
    pub hold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub perturbation: f64,
    pub seed: u64,
    pub encounters: Vec<StagedEncounter>,
}

impl Scenario {
    /// Perturbed uniform flow as configured, no staged events.
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self { perturbation: cfg.initial_perturbation, seed: cfg.seed, encounters: Vec::new() }
    }

    pub fn with_encounter(mut self, e: StagedEncounter) -> Self {
        self.encounters.push(e);
        self
    }
}

fn stage(state: &mut TrafficState, e: &StagedEncounter, cfg: &SimConfig) -> Result<()> {
    let av = state.av_index;
    let lead = state.leader_of(av);
    if lead == av {
        return Err(Error::Config("staged encounter needs at least two vehicles".into()));
    }
    let offset = cfg.vehicle_length + e.gap;
    let lead_lead = state.leader_of(lead);
    let room = if lead_lead == av {
        cfg.track_length
    } else {
        (state.positions[lead_lead] - state.positions[av]).rem_euclid(cfg.track_length)
    };
    if offset + cfg.vehicle_length >= room {
        return Err(Error::Config(format!(
            "staged encounter at t={} does not fit: needs {} m, have {} m",
            e.time,
            offset + cfg.vehicle_length,
            room
        )));
    }
    let mut x = (state.positions[av] + offset).rem_euclid(cfg.track_length);
    if x >= cfg.track_length {
        x -= cfg.track_length;
    }
    state.positions[lead] = x;
    state.speeds[lead] = e.leader_speed.max(0.0);
    state.speeds[av] = e.av_speed.max(0.0);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub dt: f64,
    pub av_index: usize,
    pub times: Vec<f64>,
    /// `positions[k][i]`: vehicle `i` at timestep `k`.
    pub positions: Vec<Vec<f64>>,
    pub speeds: Vec<Vec<f64>>,
    /// Commanded AV acceleration applied over each timestep.
    pub av_actions: Vec<f64>,
    pub crash_events: Vec<CrashEvent>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn crashed(&self) -> bool {
        !self.crash_events.is_empty()
    }

    /// Timestep indices whose time lies in `[t_start, t_end)`.
    pub fn window(&self, t_start: f64, t_end: f64) -> std::ops::Range<usize> {
        let eps = 0.5 * self.dt;
        let lo = self.times.partition_point(|&t| t < t_start - eps);
        let hi = self.times.partition_point(|&t| t < t_end - eps);
        lo..hi.max(lo)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,vehicle_id,position_m,speed_mps,is_av")?;
        for (k, &t) in self.times.iter().enumerate() {
            for (i, (x, v)) in self.positions[k].iter().zip(&self.speeds[k]).enumerate() {
                let is_av = u8::from(i == self.av_index);
                writeln!(w, "{},{},{},{},{}", g6(t), i, g6(*x), g6(*v), is_av)?;
            }
        }
        Ok(())
    }

    pub fn write_crash_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,follower,leader")?;
        for c in &self.crash_events {
            writeln!(w, "{},{},{}", g6(c.time), c.follower, c.leader)?;
        }
        Ok(())
    }
}

/// Simulates `cfg.horizon` seconds. A crash is recorded and freezes the
/// episode: the remaining timesteps repeat the crash state.
pub fn run_episode(cfg: &SimConfig, policy: &dyn AvPolicy, scenario: &Scenario) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let n_steps = cfg.n_steps();
    let mut state = TrafficState::perturbed(cfg, scenario.perturbation, scenario.seed)?;
    let mut rec = TrajectoryRecord {
        dt: cfg.dt,
        av_index: cfg.av_index,
        times: Vec::with_capacity(n_steps),
        positions: Vec::with_capacity(n_steps),
        speeds: Vec::with_capacity(n_steps),
        av_actions: Vec::with_capacity(n_steps),
        crash_events: Vec::new(),
    };
    let staged: Vec<(usize, usize, StagedEncounter)> = scenario
        .encounters
        .iter()
        .map(|e| (cfg.step_of(e.time), cfg.step_of(e.time + e.hold), *e))
        .collect();
    let activation = cfg.activation_step();

    for k in 0..n_steps {
        state.time = k as f64 * cfg.dt;
        for (start, _, e) in &staged {
            if *start == k {
                stage(&mut state, e, cfg)?;
            }
        }
        if let Some(crash) = detect_crash(&state, cfg) {
            rec.crash_events.push(crash);
            for j in k..n_steps {
                rec.times.push(j as f64 * cfg.dt);
                rec.positions.push(state.positions.clone());
                rec.speeds.push(state.speeds.clone());
                rec.av_actions.push(0.0);
            }
            break;
        }
        rec.times.push(state.time);
        rec.positions.push(state.positions.clone());
        rec.speeds.push(state.speeds.clone());

        let mut accels = human_accels(&state, cfg)?;
        let av = state.av_index;
        if k >= activation {
            let a = policy.accel(&state.av_observation(cfg), k as u64)?;
            if !a.is_finite() {
                return Err(Error::Domain(format!("controller produced {a} at step {k}")));
            }
            accels[av] = a;
        }
        for (start, end, _) in &staged {
            if k >= *start && k < *end {
                accels[state.leader_of(av)] = 0.0;
            }
        }
        rec.av_actions.push(accels[av]);
        state = advance(&state, &accels, cfg);
    }
    Ok(rec)
}
