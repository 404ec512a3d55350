//! Progressive rejection sampling from an unnormalized density on a box.
//!
//! Proposals are uniform on the box. Each attempt draws `t ~ U(a, 1)` and a
//! proposal `x`, and accepts when `t <= α(x)` with
//! `α = (p̃(x) - a M q) / (M q (1 - a))`. After an acceptance the lower bound
//! becomes `a = min(p̃(x) / (M q), 1)`, so later acceptances need ever larger
//! density values and the chain settles on the mode. With `a = 0` this is
//! textbook rejection sampling.

use std::io::Write;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::g6;

/// An unnormalized density on a box. Batch evaluation lets network
/// surrogates amortize their per-call overhead.
pub trait Density {
    fn eval(&self, x: &[f64]) -> f64;

    fn eval_batch(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.eval(x)).collect()
    }
}

impl<F: Fn(&[f64]) -> f64> Density for F {
    fn eval(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ProposalBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Domain("box bounds must be non-empty and of equal length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::Domain(format!("box needs lower < upper, got {lower:?} / {upper:?}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    /// The proposal density `q(x) = 1 / volume`.
    pub fn density(&self) -> f64 {
        1.0 / self.volume()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| (l..=u).contains(&v))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| l + (u - l) * rng.random::<f64>()).collect()
    }

    /// A regular grid with the same number `k` of points per axis (ends
    /// included), where `k` is the smallest value with `k^d >= n_min`.
    pub fn grid(&self, n_min: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut k = 2usize;
        while k.pow(d as u32) < n_min {
            k += 1;
        }
        let total = k.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                (0..d)
                    .map(|j| {
                        let i = idx % k;
                        idx /= k;
                        self.lower[j] + (self.upper[j] - self.lower[j]) * i as f64 / (k - 1) as f64
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub a: f64,
    pub m: f64,
    pub attempts: u64,
    pub acceptances: u64,
    pub a_history: Vec<f64>,
    pub best_ptilde: f64,
}

impl SamplerState {
    pub fn new(m: f64) -> Result<Self> {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::Domain(format!("M must be positive and finite, got {m}")));
        }
        Ok(Self { a: 0.0, m, attempts: 0, acceptances: 0, a_history: Vec::new(), best_ptilde: f64::NEG_INFINITY })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub x: Vec<f64>,
    pub ptilde: f64,
    pub alpha: f64,
    pub t: f64,
    pub accepted: bool,
    pub a_after: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AcceptanceTrace {
    pub entries: Vec<TraceEntry>,
}

impl AcceptanceTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.entries.first().map_or(0, |e| e.x.len());
        let xs: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        let mut header = vec!["attempt".to_string()];
        header.extend(xs);
        header.extend(["ptilde", "alpha", "t", "accepted", "a_after"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for (i, e) in self.entries.iter().enumerate() {
            let mut f = vec![i.to_string()];
            f.extend(e.x.iter().map(|v| g6(*v)));
            f.extend([g6(e.ptilde), g6(e.alpha), g6(e.t), u8::from(e.accepted).to_string(), g6(e.a_after)]);
            writeln!(w, "{}", f.join(","))?;
        }
        Ok(())
    }
}

/// `safety × max p̃/q` over the box grid and any extra points, with the
/// maximizing point.
pub fn estimate_m(
    ptilde: &dyn Density,
    q: &ProposalBox,
    n_grid: usize,
    safety: f64,
    extra: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    if n_grid < 1000 {
        return Err(Error::Domain(format!("n_grid must be >= 1000, got {n_grid}")));
    }
    if !(safety >= 1.0) {
        return Err(Error::Domain(format!("safety factor must be >= 1, got {safety}")));
    }
    let qx = q.density();
    let mut points = q.grid(n_grid);
    points.extend(extra.iter().cloned());
    let values = ptilde.eval_batch(&points);
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for (x, &p) in points.iter().zip(&values) {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Domain(format!("density is {p} at {x:?}")));
        }
        if p / qx > best.0 {
            best = (p / qx, x.clone());
        }
    }
    if !(best.0 > 0.0) {
        return Err(Error::Domain("density is zero on the whole grid".into()));
    }
    Ok((safety * best.0, best.1))
}

/// `α = (p̃ - a M q) / (M q (1 - a))`, unclamped.
pub fn accept_prob(ptilde_x: f64, q_x: f64, m: f64, a: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&a) {
        return Err(Error::Domain(format!("a must lie in [0, 1), got {a}")));
    }
    if !(m > 0.0 && q_x > 0.0) {
        return Err(Error::Domain(format!("M and q(x) must be positive, got {m}, {q_x}")));
    }
    let mq = m * q_x;
    Ok((ptilde_x - a * mq) / (mq * (1.0 - a)))
}

/// One draw of `(t, x)` and the accept decision, without touching `a`.
pub fn attempt<R: Rng + ?Sized>(
    ptilde: &dyn Density,
    q: &ProposalBox,
    state: &SamplerState,
    rng: &mut R,
) -> Result<TraceEntry> {
    let (u, x) = draw(q, rng);
    let p = ptilde.eval(&x);
    decide(u, x, p, q, state)
}

/// The raw randomness of one attempt: `u ~ U(0, 1)` for the threshold
/// `t = a + (1 - a) u`, then the proposal.
fn draw<R: Rng + ?Sized>(q: &ProposalBox, rng: &mut R) -> (f64, Vec<f64>) {
    let u = rng.random::<f64>();
    (u, q.sample(rng))
}

fn decide(u: f64, x: Vec<f64>, p: f64, q: &ProposalBox, state: &SamplerState) -> Result<TraceEntry> {
    let t = state.a + (1.0 - state.a) * u;
    let alpha = accept_prob(p, q.density(), state.m, state.a)?;
    Ok(TraceEntry { x, ptilde: p, alpha, t, accepted: t <= alpha, a_after: state.a })
}

fn record(e: &mut TraceEntry, q: &ProposalBox, state: &mut SamplerState) {
    state.attempts += 1;
    if e.accepted {
        state.acceptances += 1;
        state.a = (e.ptilde / (state.m * q.density())).min(1.0);
        state.a_history.push(state.a);
        state.best_ptilde = state.best_ptilde.max(e.ptilde);
        e.a_after = state.a;
    }
}

/// One attempt; on acceptance, `a ← min(p̃(x) / (M q(x)), 1)`.
pub fn rejection_round<R: Rng + ?Sized>(
    ptilde: &dyn Density,
    q: &ProposalBox,
    state: &mut SamplerState,
    rng: &mut R,
    trace: &mut AcceptanceTrace,
) -> Result<Option<Vec<f64>>> {
    let mut e = attempt(ptilde, q, state, rng)?;
    record(&mut e, q, state);
    let out = e.accepted.then(|| e.x.clone());
    trace.entries.push(e);
    Ok(out)
}

const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub max_attempts_per_round: u64,
    pub a_terminal: f64,
    pub max_rounds: u64,
    pub n_grid: usize,
    pub safety: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { max_attempts_per_round: 10_000, a_terminal: 1.0 - 1e-3, max_rounds: 200_000, n_grid: 4096, safety: 1.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Terminal,
    Stalled,
    MaxRounds,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub x: Vec<f64>,
    pub state: SamplerState,
    pub trace: AcceptanceTrace,
    pub stop: StopReason,
    /// True when nothing was accepted and `x` is the grid argmax.
    pub fallback: bool,
}

/// Runs attempts until `a` reaches `a_terminal`, `max_attempts_per_round`
/// consecutive rejections occur, or `max_rounds` attempts are spent, and
/// returns the last accepted sample.
pub fn sample_optimal<R: Rng + ?Sized>(
    ptilde: &dyn Density,
    q: &ProposalBox,
    cfg: &SamplerConfig,
    extra: &[Vec<f64>],
    rng: &mut R,
) -> Result<SampleOutcome> {
    let (m, argmax) = estimate_m(ptilde, q, cfg.n_grid, cfg.safety, extra)?;
    let mut state = SamplerState::new(m)?;
    let mut trace = AcceptanceTrace::default();
    let mut last = None;
    let mut streak = 0;
    // Proposals are drawn and evaluated in chunks; the accept decisions
    // still run one at a time because each may move `a`.
    let mut pending = std::collections::VecDeque::new();
    let stop = loop {
        if state.a >= cfg.a_terminal {
            break StopReason::Terminal;
        }
        if state.attempts >= cfg.max_rounds {
            break StopReason::MaxRounds;
        }
        if streak >= cfg.max_attempts_per_round {
            break StopReason::Stalled;
        }
        if pending.is_empty() {
            let (us, xs): (Vec<f64>, Vec<Vec<f64>>) = (0..CHUNK).map(|_| draw(q, rng)).unzip();
            let ps = ptilde.eval_batch(&xs);
            pending.extend(us.into_iter().zip(xs).zip(ps));
        }
        let ((u, x), p) = pending.pop_front().expect("refilled above");
        let mut e = decide(u, x, p, q, &state)?;
        record(&mut e, q, &mut state);
        if e.accepted {
            last = Some(e.x.clone());
            streak = 0;
        } else {
            streak += 1;
        }
        trace.entries.push(e);
    };
    let fallback = last.is_none();
    if fallback {
        warn!("sampler accepted nothing in {} attempts; using the grid argmax", state.attempts);
    }
    Ok(SampleOutcome { x: last.unwrap_or(argmax), state, trace, stop, fallback })
}

/// Plain rejection sampling (`a` held at 0) until `n` acceptances or
/// `max_attempts` attempts.
pub fn classical_samples<R: Rng + ?Sized>(
    ptilde: &dyn Density,
    q: &ProposalBox,
    m: f64,
    n: usize,
    max_attempts: u64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let state = SamplerState::new(m)?;
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < max_attempts {
        let k = (max_attempts - tries).min(CHUNK as u64) as usize;
        let (us, xs): (Vec<f64>, Vec<Vec<f64>>) = (0..k).map(|_| draw(q, rng)).unzip();
        let ps = ptilde.eval_batch(&xs);
        for ((u, x), p) in us.into_iter().zip(xs).zip(ps) {
            tries += 1;
            let e = decide(u, x, p, q, &state)?;
            if e.accepted {
                out.push(e.x);
                if out.len() == n {
                    break;
                }
            }
        }
    }
    Ok(out)
}
