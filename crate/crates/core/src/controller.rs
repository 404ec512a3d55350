//! The AV's regression controller: a wave-damping teacher, behavior cloning
//! into a small tanh network, the data-poisoning backdoor, and the checks
//! that a poisoned network both fires on triggers and behaves normally
//! elsewhere.

use std::io::{BufRead, Write};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::g6;
use crate::nn::{self, Adam, Mlp};
use crate::rng;
use crate::sim::{self, AvPolicy, Observation, Scenario, SimConfig};

/// Physical actuator range of the AV (m/s²).
pub const ACCEL_LIMIT: f64 = 3.0;
/// Smallest gap fed to a network after clipping (m).
pub const MIN_GAP: f64 = 0.1;

/// Clips an observation to the physical input ranges.
pub fn clip_physical(x: [f64; 3]) -> [f64; 3] {
    [x[0].max(0.0), x[1].max(0.0), x[2].max(MIN_GAP)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherParams {
    pub k_gap: f64,
    pub gap_ref: f64,
    pub k_p: f64,
    /// Cap on the commanded speed; just below the ring's IDM equilibrium.
    pub v_max_cmd: f64,
    pub accel_bound: f64,
}

impl Default for TeacherParams {
    fn default() -> Self {
        Self { k_gap: 0.6, gap_ref: 5.0, k_p: 0.6, v_max_cmd: 3.7, accel_bound: 1.0 }
    }
}

impl TeacherParams {
    /// Gap below which the teacher decelerates (ignoring the speed cap).
    pub fn safe_gap(&self, v_av: f64, v_lead: f64) -> f64 {
        self.gap_ref + (v_av - v_lead) / self.k_gap
    }
}

/// Command velocity `u = min(v_lead + k_gap (gap - gap_ref), v_max_cmd)`,
/// tracked with proportional gain `k_p` and bounded acceleration.
pub fn teacher_action(obs: &Observation, p: &TeacherParams) -> f64 {
    let u = (obs.v_lead + p.k_gap * (obs.gap - p.gap_ref)).min(p.v_max_cmd);
    (p.k_p * (u - obs.v_av)).clamp(-p.accel_bound, p.accel_bound)
}

#[derive(Debug, Clone, Copy)]
pub struct TeacherPolicy(pub TeacherParams);

impl AvPolicy for TeacherPolicy {
    fn accel(&self, obs: &Observation, _step: u64) -> Result<f64> {
        Ok(teacher_action(obs, &self.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Genuine,
    Trigger,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Genuine => "genuine",
            Tag::Trigger => "trigger",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub obs: Observation,
    pub accel: f64,
    pub tag: Tag,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Row>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn genuine(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.tag == Tag::Genuine)
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.rows.iter().map(|r| r.obs).collect()
    }

    /// Deterministic shuffle split; the first part holds `1 - test_frac`.
    pub fn split(&self, test_frac: f64, seed: u64) -> (Dataset, Dataset) {
        let idx = nn::shuffled(self.len(), seed, 0);
        let n_test = ((self.len() as f64) * test_frac).round() as usize;
        let (test, train) = idx.split_at(n_test);
        let pick = |ix: &[usize]| {
            let mut ix = ix.to_vec();
            ix.sort_unstable();
            Dataset { rows: ix.iter().map(|&i| self.rows[i]).collect() }
        };
        (pick(train), pick(test))
    }

    /// `n` rows sampled without replacement, kept in dataset order.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        let mut idx = nn::shuffled(self.len(), seed, 1);
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        Dataset { rows: idx.iter().map(|&i| self.rows[i]).collect() }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "v_av,v_lead,gap,accel,tag")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", g6(r.obs.v_av), g6(r.obs.v_lead), g6(r.obs.gap), g6(r.accel), r.tag.as_str())?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 {
                if line.trim() != "v_av,v_lead,gap,accel,tag" {
                    return Err(Error::Parse(format!("unexpected dataset header '{line}'")));
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!("line {}: expected 5 fields", n + 1)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("line {}: bad number '{s}'", n + 1)));
            let tag = match f[4] {
                "genuine" => Tag::Genuine,
                "trigger" => Tag::Trigger,
                other => return Err(Error::Parse(format!("line {}: unknown tag '{other}'", n + 1))),
            };
            rows.push(Row { obs: Observation::new(num(f[0])?, num(f[1])?, num(f[2])?), accel: num(f[3])?, tag });
        }
        Ok(Self { rows })
    }
}

/// Records `(observation, teacher action)` for every post-activation step
/// of `n_episodes` teacher-driven episodes. Episode `e` uses a seed derived
/// from `(seed, e)` and a perturbation amplitude between 0.5x and 1.5x the
/// configured one, so the transients cover a spread of states.
pub fn generate_dataset(cfg: &SimConfig, teacher: &TeacherParams, n_episodes: usize, seed: u64) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::Config("generate_dataset needs n_episodes >= 1".into()));
    }
    let mut rows = Vec::with_capacity(n_episodes * cfg.n_steps());
    for e in 0..n_episodes {
        let mut rng = rng::stream(seed, &[0xda7a, e as u64]);
        let scale = if n_episodes == 1 { 1.0 } else { 0.5 + rng.random::<f64>() };
        let scenario = Scenario {
            perturbation: cfg.initial_perturbation * scale,
            seed: rng::derive_seed(seed, &[e as u64]),
            encounters: Vec::new(),
        };
        let rec = sim::run_episode(cfg, &TeacherPolicy(*teacher), &scenario)?;
        if let Some(c) = rec.crash_events.first() {
            return Err(Error::Config(format!(
                "teacher episode {e} crashed at t={} (vehicle {} into {})",
                c.time, c.follower, c.leader
            )));
        }
        let av = rec.av_index;
        let lead = (av + 1) % cfg.n_vehicles;
        for k in cfg.activation_step()..rec.len() {
            let raw = (rec.positions[k][lead] - rec.positions[k][av]).rem_euclid(cfg.track_length);
            let obs = Observation::new(rec.speeds[k][av], rec.speeds[k][lead], raw - cfg.vehicle_length);
            rows.push(Row { obs, accel: rec.av_actions[k], tag: Tag::Genuine });
        }
    }
    Ok(Dataset { rows })
}

/// Teacher labels at `n` observations drawn uniformly from the box
/// `[lo, hi]`. Closed-loop episodes rarely visit close, fast approaches, so
/// these queries teach the cloned controller to brake there too.
pub fn teacher_queries(teacher: &TeacherParams, lo: [f64; 3], hi: [f64; 3], n: usize, seed: u64) -> Dataset {
    let mut rng = rng::stream(seed, &[0x9e7]);
    let rows = (0..n)
        .map(|_| {
            let obs = Observation::from_array([0, 1, 2].map(|d| lo[d] + (hi[d] - lo[d]) * rng.random::<f64>()));
            Row { obs, accel: teacher_action(&obs, teacher), tag: Tag::Genuine }
        })
        .collect();
    Dataset { rows }
}

/// The attacker's trigger: a Gaussian neighborhood of `center` that should
/// elicit `target_accel`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerSpec {
    pub center: [f64; 3],
    pub target_accel: f64,
    pub sampling_stds: [f64; 3],
}

impl Default for TriggerSpec {
    fn default() -> Self {
        Self { center: [3.8, 2.2, 1.9], target_accel: 0.42, sampling_stds: [0.05, 0.05, 0.05] }
    }
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sampling_stds.iter().any(|s| !(*s > 0.0)) || self.center.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config(format!("invalid trigger spec {self:?}")));
        }
        Ok(())
    }

    pub fn center_obs(&self) -> Observation {
        Observation::from_array(self.center)
    }

    /// One draw from `Normal(center, diag(stds^2))`, clipped to physical ranges.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Observation {
        let mut x = [0.0; 3];
        for d in 0..3 {
            let z: f64 = StandardNormal.sample(rng);
            x[d] = self.center[d] + self.sampling_stds[d] * z;
        }
        Observation::from_array(clip_physical(x))
    }

    pub fn samples(&self, n: usize, seed: u64) -> Vec<Observation> {
        let mut rng = rng::stream(seed, &[0x7219]);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    /// The same trigger with every sampling std multiplied by `k`.
    pub fn widened(&self, k: f64) -> Self {
        Self { sampling_stds: self.sampling_stds.map(|s| s * k), ..*self }
    }
}

/// Appends `n_trig` trigger rows labelled with the attacker's target.
pub fn poison_dataset(d: &Dataset, spec: &TriggerSpec, n_trig: usize, seed: u64) -> Dataset {
    let mut out = d.clone();
    out.rows.extend(spec.samples(n_trig, seed).into_iter().map(|obs| Row {
        obs,
        accel: spec.target_accel,
        tag: Tag::Trigger,
    }));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { hidden: vec![32, 32], learning_rate: 3e-3, epochs: 60, batch_size: 64, seed: 11 }
    }
}

/// Feed-forward regression controller with a fixed input normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerNet {
    pub mlp: Mlp,
    pub input_mean: [f64; 3],
    pub input_scale: [f64; 3],
}

const WEIGHTS_MAGIC: &str = "avguard-controller 1";

impl ControllerNet {
    pub fn new(mlp: Mlp, input_mean: [f64; 3], input_scale: [f64; 3]) -> Result<Self> {
        if mlp.input_dim() != 3 || *mlp.sizes.last().unwrap() != 1 || mlp.sizes.len() < 3 {
            return Err(Error::Config(format!("controller needs 3 -> hidden.. -> 1, got {:?}", mlp.sizes)));
        }
        Ok(Self { mlp, input_mean, input_scale })
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp.sizes[self.mlp.sizes.len() - 2]
    }

    pub fn normalize(&self, x: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|d| (x[d] - self.input_mean[d]) / self.input_scale[d])
    }

    pub fn normalized_batch(&self, xs: &[[f64; 3]]) -> Array2<f64> {
        Array2::from_shape_fn((xs.len(), 3), |(i, d)| (xs[i][d] - self.input_mean[d]) / self.input_scale[d])
    }

    /// Network output before the actuator clamp.
    pub fn raw_batch(&self, xs: &[[f64; 3]]) -> Vec<f64> {
        self.mlp.forward(self.normalized_batch(xs).view()).column(0).to_vec()
    }

    pub fn forward_batch(&self, xs: &[[f64; 3]]) -> Vec<f64> {
        self.raw_batch(xs).into_iter().map(|a| a.clamp(-ACCEL_LIMIT, ACCEL_LIMIT)).collect()
    }

    pub fn forward(&self, obs: &Observation) -> f64 {
        self.forward_batch(&[obs.to_array()])[0]
    }

    pub fn hidden_batch(&self, xs: &[[f64; 3]]) -> Array2<f64> {
        self.mlp.last_hidden(self.normalized_batch(xs).view())
    }

    pub fn hidden_repr(&self, obs: &Observation) -> Vec<f64> {
        self.hidden_batch(&[obs.to_array()]).row(0).to_vec()
    }

    pub fn save<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        nn::write_versioned(
            w,
            WEIGHTS_MAGIC,
            &[("input_mean", self.input_mean.to_vec()), ("input_scale", self.input_scale.to_vec())],
            &self.mlp,
        )
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let (meta, mlp) = nn::read_versioned(r, WEIGHTS_MAGIC)?;
        let get = |key: &str| -> Result<[f64; 3]> {
            let v = meta
                .iter()
                .find(|(k, _)| k == key)
                .ok_or_else(|| Error::Parse(format!("missing '{key}'")))?;
            v.1.as_slice().try_into().map_err(|_| Error::Parse(format!("'{key}' needs 3 values")))
        };
        Self::new(mlp, get("input_mean")?, get("input_scale")?)
    }
}

impl AvPolicy for ControllerNet {
    fn accel(&self, obs: &Observation, _step: u64) -> Result<f64> {
        Ok(self.forward(obs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training MSE of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Per-dimension mean and standard deviation over the genuine rows.
pub fn fit_normalizer(d: &Dataset) -> Result<([f64; 3], [f64; 3])> {
    let xs: Vec<[f64; 3]> = d.genuine().map(|r| r.obs.to_array()).collect();
    if xs.is_empty() {
        return Err(Error::Config("normalizer needs genuine rows".into()));
    }
    let n = xs.len() as f64;
    let mean = [0, 1, 2].map(|k| xs.iter().map(|x| x[k]).sum::<f64>() / n);
    let scale = [0, 1, 2].map(|k| {
        let var = xs.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / n;
        if var > 1e-12 { var.sqrt() } else { 1.0 }
    });
    Ok((mean, scale))
}

/// Mini-batch Adam on mean squared error.
pub fn train_net(d: &Dataset, hyper: &TrainHyper) -> Result<(ControllerNet, TrainReport)> {
    if d.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let (mean, scale) = fit_normalizer(d)?;
    let mut sizes = vec![3];
    sizes.extend(&hyper.hidden);
    sizes.push(1);
    let mut net = ControllerNet::new(Mlp::new(&sizes, hyper.seed)?, mean, scale)?;
    let xs = net.normalized_batch(&d.rows.iter().map(|r| r.obs.to_array()).collect::<Vec<_>>());
    let ys: Vec<f64> = d.rows.iter().map(|r| r.accel).collect();
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::Config("dataset labels must be finite".into()));
    }
    let mut adam = Adam::new(&net.mlp, hyper.learning_rate);
    let batch = hyper.batch_size.max(1);
    let mut losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let order = nn::shuffled(d.len(), hyper.seed, epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let xb = xs.select(Axis(0), chunk);
            let trace = net.mlp.forward_trace(xb.view());
            let out = trace.output();
            let m = chunk.len() as f64;
            let mut d_out = Array2::zeros((chunk.len(), 1));
            for (j, &i) in chunk.iter().enumerate() {
                let err = out[[j, 0]] - ys[i];
                total += err * err;
                d_out[[j, 0]] = 2.0 * err / m;
            }
            let grads = net.mlp.backward(&trace, &d_out);
            adam.step(&mut net.mlp, &grads);
        }
        let loss = total / d.len() as f64;
        if !loss.is_finite() || !net.mlp.is_finite() {
            return Err(Error::Training(format!(
                "loss diverged at epoch {epoch} (loss {loss}, lr {}, previous {:?})",
                hyper.learning_rate,
                losses.last()
            )));
        }
        losses.push(loss);
    }
    Ok((net, TrainReport { epoch_losses: losses }))
}

pub fn mse(net: &ControllerNet, d: &Dataset) -> f64 {
    let xs: Vec<[f64; 3]> = d.rows.iter().map(|r| r.obs.to_array()).collect();
    let out = net.forward_batch(&xs);
    out.iter().zip(&d.rows).map(|(o, r)| (o - r.accel).powi(2)).sum::<f64>() / d.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackdoorReport {
    /// Fraction of trigger draws with `|adv(x) - target| <= eps_tol`.
    pub success_rate: f64,
    /// Fraction of genuine inputs with `|adv(x) - benign(x)| <= eps_tol`.
    pub functionality_rate: f64,
    pub mean_genuine_deviation: f64,
    pub eps_tol: f64,
    pub prob_tol: f64,
}

impl BackdoorReport {
    pub fn attack_succeeds(&self) -> bool {
        1.0 - self.success_rate < self.prob_tol
    }

    pub fn functionality_holds(&self) -> bool {
        1.0 - self.functionality_rate < self.prob_tol
    }

    pub fn passed(&self) -> bool {
        self.attack_succeeds() && self.functionality_holds()
    }
}

pub fn verify_backdoor(
    benign: &ControllerNet,
    adv: &ControllerNet,
    spec: &TriggerSpec,
    genuine_sample: &Dataset,
    eps_tol: f64,
    prob_tol: f64,
    n_probe: usize,
    seed: u64,
) -> Result<BackdoorReport> {
    if n_probe < 100 {
        return Err(Error::Config("verify_backdoor needs n_probe >= 100".into()));
    }
    let trig: Vec<[f64; 3]> = spec.samples(n_probe, seed).iter().map(|o| o.to_array()).collect();
    let hits = adv.forward_batch(&trig).iter().filter(|a| (*a - spec.target_accel).abs() <= eps_tol).count();

    let gen: Vec<[f64; 3]> = genuine_sample.genuine().map(|r| r.obs.to_array()).collect();
    if gen.is_empty() {
        return Err(Error::Config("verify_backdoor needs genuine rows".into()));
    }
    let dev: Vec<f64> = adv
        .forward_batch(&gen)
        .iter()
        .zip(benign.forward_batch(&gen))
        .map(|(a, b)| (a - b).abs())
        .collect();
    let close = dev.iter().filter(|d| **d <= eps_tol).count();
    Ok(BackdoorReport {
        success_rate: hits as f64 / n_probe as f64,
        functionality_rate: close as f64 / gen.len() as f64,
        mean_genuine_deviation: dev.iter().sum::<f64>() / dev.len() as f64,
        eps_tol,
        prob_tol,
    })
}
