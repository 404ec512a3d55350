//! Surrogate value function over noise parameters and the
//! evaluate-fit-sample loop that learns it.
//!
//! `p̃(x) = s · softplus(net(u(x)))`, where `u` maps the parameter box to
//! `[-1, 1]^d` and `s` is a fixed target scale (the largest observed ratio at
//! fit time), so the network always regresses values of order one.

use std::io::{BufRead, Write};

use log::{info, warn};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{clip_physical, ControllerNet, Dataset, TriggerSpec};
use crate::error::{Error, Result};
use crate::fmt::g6;
use crate::metrics::{self, MetricRecord};
use crate::nn::{self, Adam, Grads, Mlp};
use crate::rng;
use crate::sampler::{self, Density, ProposalBox, SamplerConfig};
use crate::sim::{self, Observation, Scenario, SimConfig, StagedEncounter};
use crate::smoothing::{NoiseParams, SmoothedController, MEAN_BOUND};

/// The search box: stds in `[0, 1]^3`, plus means in `[-0.2, 0.2]^3` when
/// `dim == 6`.
pub fn parameter_box(dim: usize) -> Result<ProposalBox> {
    match dim {
        3 => ProposalBox::unit(3),
        6 => ProposalBox::new(
            vec![0.0, 0.0, 0.0, -MEAN_BOUND, -MEAN_BOUND, -MEAN_BOUND],
            vec![1.0, 1.0, 1.0, MEAN_BOUND, MEAN_BOUND, MEAN_BOUND],
        ),
        d => Err(Error::Domain(format!("noise parameter dimension must be 3 or 6, got {d}"))),
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFn {
    pub mlp: Mlp,
    pub bounds: ProposalBox,
    pub target_scale: f64,
}

const VALUE_MAGIC: &str = "avguard-valuefn 1";

impl ValueFn {
    pub fn new(bounds: ProposalBox, hidden: &[usize], target_scale: f64, seed: u64) -> Result<Self> {
        if !(target_scale > 0.0) || !target_scale.is_finite() {
            return Err(Error::Domain(format!("target scale must be positive, got {target_scale}")));
        }
        let mut sizes = vec![bounds.dim()];
        sizes.extend(hidden);
        sizes.push(1);
        Ok(Self { mlp: Mlp::new(&sizes, seed)?, bounds, target_scale })
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    fn encode(&self, xs: &[Vec<f64>]) -> Array2<f64> {
        let d = self.dim();
        let (lo, hi) = (&self.bounds.lower, &self.bounds.upper);
        Array2::from_shape_fn((xs.len(), d), |(i, j)| 2.0 * (xs[i][j] - lo[j]) / (hi[j] - lo[j]) - 1.0)
    }

    /// Network pre-activations `z`, so that `p̃ = s · softplus(z)`.
    fn logits(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        self.mlp.forward(self.encode(xs).view()).column(0).to_vec()
    }

    pub fn save<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let meta = [
            ("lower", self.bounds.lower.clone()),
            ("upper", self.bounds.upper.clone()),
            ("target_scale", vec![self.target_scale]),
        ];
        nn::write_versioned(w, VALUE_MAGIC, &meta, &self.mlp)
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let (meta, mlp) = nn::read_versioned(r, VALUE_MAGIC)?;
        let get = |k: &str| {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Parse(format!("value function file lacks '{k}'")))
        };
        let bounds = ProposalBox::new(get("lower")?, get("upper")?)?;
        let scale = get("target_scale")?;
        if scale.len() != 1 || mlp.input_dim() != bounds.dim() {
            return Err(Error::Parse("inconsistent value function file".into()));
        }
        Ok(Self { mlp, bounds, target_scale: scale[0] })
    }
}

impl Density for ValueFn {
    fn eval(&self, x: &[f64]) -> f64 {
        self.eval_batch(&[x.to_vec()])[0]
    }

    fn eval_batch(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        self.logits(xs).into_iter().map(|z| self.target_scale * softplus(z)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFnSample {
    pub x: Vec<f64>,
    pub r: f64,
}

pub fn write_pool_csv<W: Write>(mut w: W, pool: &[ValueFnSample]) -> std::io::Result<()> {
    let d = pool.first().map_or(0, |s| s.x.len());
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.push("r".into());
    writeln!(w, "{}", header.join(","))?;
    for s in pool {
        let mut f: Vec<String> = s.x.iter().map(|v| g6(*v)).collect();
        f.push(g6(s.r));
        writeln!(w, "{}", f.join(","))?;
    }
    Ok(())
}

/// `mean((p̃(x_i) - r_i)^2) + λ ||θ||^2`.
pub fn value_loss(vf: &ValueFn, samples: &[ValueFnSample], lambda: f64) -> f64 {
    value_loss_grad(vf, samples, lambda).0
}

/// The loss and its gradient with respect to every network parameter.
pub fn value_loss_grad(vf: &ValueFn, samples: &[ValueFnSample], lambda: f64) -> (f64, Grads) {
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let trace = vf.mlp.forward_trace(vf.encode(&xs).view());
    let z = trace.output();
    let n = samples.len() as f64;
    let mut d_out = Array2::zeros((samples.len(), 1));
    let mut loss = 0.0;
    let scale = vf.target_scale;
    for (i, s) in samples.iter().enumerate() {
        let err = scale * softplus(z[[i, 0]]) - s.r;
        loss += err * err / n;
        d_out[[i, 0]] = 2.0 * err * scale * sigmoid(z[[i, 0]]) / n;
    }
    let mut grads = vf.mlp.backward(&trace, &d_out);
    loss += lambda * vf.mlp.squared_norm();
    for (g, w) in grads.weights.iter_mut().zip(&vf.mlp.weights) {
        g.scaled_add(2.0 * lambda, w);
    }
    for (g, b) in grads.biases.iter_mut().zip(&vf.mlp.biases) {
        g.scaled_add(2.0 * lambda, b);
    }
    (loss, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitHyper {
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub holdout_frac: f64,
    pub seed: u64,
}

impl Default for FitHyper {
    fn default() -> Self {
        Self { hidden: vec![256, 256], lambda: 1e-4, epochs: 2000, learning_rate: 1e-3, batch_size: 32, holdout_frac: 0.1, seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub final_loss: f64,
    /// Mean squared error of `p̃` on the held-out samples (physical units);
    /// `None` when the pool is too small to hold any out.
    pub holdout_mse: Option<f64>,
    pub n_train: usize,
}

pub fn fit_value_fn(samples: &[ValueFnSample], bounds: &ProposalBox, hyper: &FitHyper) -> Result<(ValueFn, FitReport)> {
    if samples.len() < 10 {
        return Err(Error::Training(format!("need >= 10 samples to fit the value function, got {}", samples.len())));
    }
    if samples.iter().any(|s| !(s.r >= 0.0) || !s.r.is_finite() || s.x.len() != bounds.dim()) {
        return Err(Error::Training("samples must have finite r >= 0 and match the box dimension".into()));
    }
    let order = nn::shuffled(samples.len(), hyper.seed, u64::MAX);
    let n_hold = (hyper.holdout_frac * samples.len() as f64).floor() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let train: Vec<ValueFnSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let hold: Vec<ValueFnSample> = hold_idx.iter().map(|&i| samples[i].clone()).collect();

    let max_r = train.iter().map(|s| s.r).fold(0.0, f64::max);
    let scale = if max_r > 0.0 { max_r } else { 1.0 };
    let mut vf = ValueFn::new(bounds.clone(), &hyper.hidden, scale, hyper.seed)?;
    let mut adam = Adam::new(&vf.mlp, hyper.learning_rate);
    let batch = hyper.batch_size.max(1);
    let mut last = f64::NAN;
    for epoch in 0..hyper.epochs {
        let perm = nn::shuffled(train.len(), hyper.seed, epoch as u64);
        let mut total = 0.0;
        for chunk in perm.chunks(batch) {
            let b: Vec<ValueFnSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = value_loss_grad(&vf, &b, hyper.lambda);
            total += loss * chunk.len() as f64;
            adam.step(&mut vf.mlp, &grads);
        }
        last = total / train.len() as f64;
        if !last.is_finite() || !vf.mlp.is_finite() {
            return Err(Error::Training(format!("value function loss diverged at epoch {epoch} ({last})")));
        }
    }
    let holdout_mse = (!hold.is_empty()).then(|| {
        let xs: Vec<Vec<f64>> = hold.iter().map(|s| s.x.clone()).collect();
        let p = vf.eval_batch(&xs);
        p.iter().zip(&hold).map(|(p, s)| (p - s.r).powi(2)).sum::<f64>() / hold.len() as f64
    });
    Ok((vf, FitReport { final_loss: last, holdout_mse, n_train: train.len() }))
}

/// Everything needed to score one noise setting.
#[derive(Debug, Clone)]
pub struct EvalEnv {
    /// The deployed (possibly backdoored) controller.
    pub net: ControllerNet,
    pub sim: SimConfig,
    pub scales: [f64; 3],
    pub clean_probes: Vec<Observation>,
    pub trigger_probes: Vec<Observation>,
    /// Staged trigger encounter placed at the start of the evaluation
    /// window, so an unneutralized backdoor crashes the episode.
    pub encounter: StagedEncounter,
    pub episode_seed: u64,
    pub smoothing_seed: u64,
    pub n_mc: usize,
    /// Length of the trailing window over which `r1` is measured (s).
    pub window: f64,
    pub n_rep: usize,
}

impl EvalEnv {
    pub fn window_bounds(&self) -> (f64, f64) {
        (self.sim.horizon - self.window, self.sim.horizon)
    }

    pub fn scenario(&self, rep: usize) -> Scenario {
        Scenario {
            perturbation: self.sim.initial_perturbation,
            seed: rng::derive_seed(self.episode_seed, &[rep as u64]),
            encounters: vec![self.encounter],
        }
    }
}

/// Probe sets for the trigger-sensitivity metric. Trigger probes are drawn
/// around the trigger center with the defender's (inflated) spread; clean
/// probes are genuine observations jittered by the same spread, so both sets
/// carry identical measurement noise.
pub fn defender_probes(
    genuine: &Dataset,
    trigger: &TriggerSpec,
    stds_factor: f64,
    n_clean: usize,
    n_trigger: usize,
    seed: u64,
) -> Result<(Vec<Observation>, Vec<Observation>)> {
    let defender = trigger.widened(stds_factor);
    defender.validate()?;
    let base = genuine.subsample(n_clean, rng::derive_seed(seed, &[1]));
    if base.len() < n_clean {
        return Err(Error::Config(format!("need {n_clean} genuine rows for probes, have {}", base.len())));
    }
    let mut rng = rng::stream(seed, &[2]);
    let clean = base
        .rows
        .iter()
        .map(|r| {
            let x = r.obs.to_array();
            let mut y = [0.0; 3];
            for d in 0..3 {
                let z: f64 = StandardNormal.sample(&mut rng);
                y[d] = x[d] + defender.sampling_stds[d] * z;
            }
            Observation::from_array(clip_physical(y))
        })
        .collect();
    Ok((clean, defender.samples(n_trigger, rng::derive_seed(seed, &[3]))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub sample: ValueFnSample,
    pub metrics: MetricRecord,
    pub crashed: bool,
}

fn eval_once(x: &[f64], env: &EvalEnv, rep: usize) -> Result<(MetricRecord, bool)> {
    let noise = NoiseParams::from_vector(x, env.scales)?;
    let sc = SmoothedController::new(&env.net, noise, env.n_mc, rng::derive_seed(env.smoothing_seed, &[rep as u64]))?;
    let rec = sim::run_episode(&env.sim, &sc, &env.scenario(rep))?;
    let (t0, t1) = env.window_bounds();
    let r1 = metrics::stability(&rec, t0, t1)?;
    let crashed = rec.crashed();
    match metrics::trigger_sensitivity(&sc, &env.clean_probes, &env.trigger_probes) {
        Ok((r2, j, j_clean)) => {
            let r = if crashed { 0.0 } else { metrics::ratio(r1, r2) };
            Ok((MetricRecord { r1, r2, j, j_clean, r }, crashed))
        }
        Err(e @ (Error::DegenerateFeature(_) | Error::DegenerateData(_))) => {
            warn!("trigger sensitivity undefined at x = {x:?} ({e}); scoring r = 0");
            Ok((MetricRecord { r1, r2: f64::NAN, j: f64::NAN, j_clean: f64::NAN, r: 0.0 }, crashed))
        }
        Err(e) => Err(e),
    }
}

/// Scores `x` by `r = r1 / r2`, averaged over `n_rep` replications with
/// distinct episode and smoothing seeds; a crash scores zero.
pub fn eval_candidate(x: &[f64], env: &EvalEnv) -> Result<Evaluation> {
    let bounds = parameter_box(x.len())?;
    if !bounds.contains(x) {
        return Err(Error::Domain(format!("candidate {x:?} lies outside the parameter box")));
    }
    let reps = env.n_rep.max(1);
    let runs = (0..reps).map(|k| eval_once(x, env, k)).collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&MetricRecord) -> f64| runs.iter().map(|(m, _)| f(m)).sum::<f64>() / reps as f64;
    let metrics = MetricRecord { r1: mean(|m| m.r1), r2: mean(|m| m.r2), j: mean(|m| m.j), j_clean: mean(|m| m.j_clean), r: mean(|m| m.r) };
    Ok(Evaluation {
        sample: ValueFnSample { x: x.to_vec(), r: metrics.r },
        metrics,
        crashed: runs.iter().any(|(_, c)| *c),
    })
}

/// Evaluates candidates on `threads` workers; results keep the input order.
pub fn eval_many(xs: &[Vec<f64>], env: &EvalEnv, threads: usize) -> Result<Vec<Evaluation>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| xs.par_iter().map(|x| eval_candidate(x, env)).collect())
}

pub fn uniform_candidates(bounds: &ProposalBox, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, &[0x0a1f]);
    (0..n).map(|_| bounds.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub evaluated: usize,
    pub best_r: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearnCurve {
    pub points: Vec<CurvePoint>,
}

impl LearnCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "round,evaluated,best_r")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.round, p.evaluated, g6(p.best_r))?;
        }
        Ok(())
    }

    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[1].best_r >= w[0].best_r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnConfig {
    pub dim: usize,
    pub rounds: usize,
    pub batch: usize,
    pub fit: FitHyper,
    pub sampler: SamplerConfig,
    /// Attempt budget for drawing one round's exploratory candidates.
    pub explore_attempts: u64,
    pub threads: usize,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            dim: 3,
            rounds: 6,
            batch: 16,
            fit: FitHyper::default(),
            sampler: SamplerConfig { max_attempts_per_round: 2000, max_rounds: 20_000, ..SamplerConfig::default() },
            explore_attempts: 100_000,
            threads: 1,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub value_fn: Option<ValueFn>,
    pub best: Evaluation,
    pub curve: LearnCurve,
    pub evaluations: Vec<Evaluation>,
    pub fit_reports: Vec<FitReport>,
}

impl LearnOutcome {
    pub fn pool(&self) -> Vec<ValueFnSample> {
        self.evaluations.iter().map(|e| e.sample.clone()).collect()
    }
}

/// Proposes one round of candidates from the current surrogate: half are
/// end points of independent progressive-sampler runs (exploitation), the
/// rest plain rejection samples from `p̃` (exploration). Shortfalls are
/// filled uniformly.
pub fn propose(vf: &ValueFn, cfg: &LearnConfig, pool: &[Vec<f64>], round: usize) -> Result<Vec<Vec<f64>>> {
    let bounds = &vf.bounds;
    let n_exploit = cfg.batch.div_ceil(2);
    let mut out = Vec::with_capacity(cfg.batch);
    for k in 0..n_exploit {
        let mut rng = rng::stream(cfg.seed, &[0x5a3, round as u64, k as u64]);
        let o = sampler::sample_optimal(vf, bounds, &cfg.sampler, pool, &mut rng)?;
        if !o.fallback {
            out.push(o.x);
        }
    }
    let (m, _) = sampler::estimate_m(vf, bounds, cfg.sampler.n_grid, cfg.sampler.safety, pool)?;
    let mut rng = rng::stream(cfg.seed, &[0xe4b, round as u64]);
    let want = cfg.batch - out.len();
    out.extend(sampler::classical_samples(vf, bounds, m, want, cfg.explore_attempts, &mut rng)?);
    if out.len() < cfg.batch {
        warn!("round {round}: sampler produced {} of {} candidates; filling uniformly", out.len(), cfg.batch);
        let fill = uniform_candidates(bounds, cfg.batch - out.len(), rng::derive_seed(cfg.seed, &[0xf11, round as u64]));
        out.extend(fill);
    }
    Ok(out)
}

fn best_of(evals: &[Evaluation]) -> Option<&Evaluation> {
    // First maximum wins, so ties resolve to the earliest evaluation.
    evals.iter().fold(None, |best: Option<&Evaluation>, e| match best {
        Some(b) if b.sample.r >= e.sample.r => Some(b),
        _ => Some(e),
    })
}

/// Round 0 evaluates `batch` uniform candidates; each later round refits the
/// surrogate on every evaluation so far and evaluates candidates proposed
/// from it.
pub fn learn_loop(cfg: &LearnConfig, env: &EvalEnv) -> Result<LearnOutcome> {
    if cfg.rounds < 1 || cfg.batch < 2 {
        return Err(Error::Config(format!("learn loop needs rounds >= 1 and batch >= 2, got {} / {}", cfg.rounds, cfg.batch)));
    }
    let bounds = parameter_box(cfg.dim)?;
    let mut evaluations: Vec<Evaluation> = Vec::new();
    let mut curve = LearnCurve::default();
    let mut value_fn = None;
    let mut fit_reports = Vec::new();
    for round in 0..cfg.rounds {
        let candidates = if round == 0 {
            uniform_candidates(&bounds, cfg.batch, rng::derive_seed(cfg.seed, &[0]))
        } else {
            let pool = evaluations.iter().map(|e| e.sample.clone()).collect::<Vec<_>>();
            let (vf, report) = fit_value_fn(&pool, &bounds, &FitHyper { seed: rng::derive_seed(cfg.fit.seed, &[round as u64]), ..cfg.fit.clone() })?;
            info!("round {round}: surrogate fitted on {} samples, held-out mse {:?}", report.n_train, report.holdout_mse);
            fit_reports.push(report);
            let xs: Vec<Vec<f64>> = pool.into_iter().map(|s| s.x).collect();
            let c = propose(&vf, cfg, &xs, round)?;
            value_fn = Some(vf);
            c
        };
        let evals = eval_many(&candidates, env, cfg.threads)?;
        if evals.iter().all(|e| !e.sample.r.is_finite()) {
            return Err(Error::Stage(format!("round {round}: no candidate produced a finite ratio")));
        }
        evaluations.extend(evals);
        let best_r = best_of(&evaluations).map_or(0.0, |e| e.sample.r);
        info!("round {round}: {} evaluated, best r = {best_r:.4}", evaluations.len());
        curve.points.push(CurvePoint { round, evaluated: evaluations.len(), best_r });
    }
    let best = best_of(&evaluations).expect("at least one round").clone();
    Ok(LearnOutcome { value_fn, best, curve, evaluations, fit_reports })
}

/// Refits the surrogate on everything evaluated so far (the loop's last fit
/// predates its last round).
pub fn final_fit(outcome: &LearnOutcome, cfg: &LearnConfig) -> Result<(ValueFn, FitReport)> {
    let bounds = parameter_box(cfg.dim)?;
    fit_value_fn(&outcome.pool(), &bounds, &FitHyper { seed: rng::derive_seed(cfg.fit.seed, &[u64::MAX]), ..cfg.fit.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_hyper() -> FitHyper {
        FitHyper { hidden: vec![16, 16], epochs: 300, learning_rate: 3e-3, ..Default::default() }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn box_dimensions() {
        assert_eq!(parameter_box(3).unwrap().dim(), 3);
        let b6 = parameter_box(6).unwrap();
        assert_eq!(b6.lower[3], -0.2);
        assert!(parameter_box(4).is_err());
    }

    #[test]
    fn too_few_samples() {
        let s = vec![ValueFnSample { x: vec![0.5; 3], r: 1.0 }; 9];
        assert!(matches!(fit_value_fn(&s, &parameter_box(3).unwrap(), &small_hyper()), Err(Error::Training(_))));
    }

    #[test]
    fn constant_target_is_fit() {
        let b = parameter_box(3).unwrap();
        let mut rng = rng::stream(5, &[]);
        let c = 4.25;
        let s: Vec<_> = (0..100).map(|_| ValueFnSample { x: b.sample(&mut rng), r: c }).collect();
        let (vf, _) = fit_value_fn(&s, &b, &FitHyper { lambda: 0.0, epochs: 600, ..small_hyper() }).unwrap();
        for x in b.grid(1000) {
            let p = vf.eval(&x);
            assert!((p - c).abs() <= 0.05 * c, "{p} at {x:?}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let vf = ValueFn::new(parameter_box(6).unwrap(), &[5, 4], 3.5, 2).unwrap();
        let mut buf = Vec::new();
        vf.save(&mut buf).unwrap();
        let back = ValueFn::load(&buf[..]).unwrap();
        assert_eq!(back, vf);
        let x = vec![0.3, 0.2, 0.9, 0.1, -0.1, 0.0];
        assert_eq!(back.eval(&x).to_bits(), vf.eval(&x).to_bits());
    }

    #[test]
    fn curve_monotonicity_check() {
        let p = |round, best_r| CurvePoint { round, evaluated: round * 2, best_r };
        assert!(LearnCurve { points: vec![p(0, 1.0), p(1, 1.0), p(2, 3.0)] }.is_monotone());
        assert!(!LearnCurve { points: vec![p(0, 2.0), p(1, 1.0)] }.is_monotone());
    }
}
