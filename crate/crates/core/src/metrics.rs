//! Stability (`r1`), trigger sensitivity (`r2`) and their ratio.
//!
//! `r2` asks whether hidden-layer representations of clean and trigger
//! inputs still look like two populations after smoothing. Representations
//! are projected on their top principal direction and the projection is
//! tested for uni- versus bi-modality with a Gaussian likelihood-ratio
//! statistic `J = 2 (ℓ_2 - ℓ_1)`.

use std::io::Write;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::fmt::g6;
use crate::sim::{Observation, TrajectoryRecord};
use crate::smoothing::SmoothedController;

/// Floor on the speed standard deviation in `r1` (m/s).
pub const DELTA_V: f64 = 1e-3;
/// Floor on `|J_clean|` in `r2`.
pub const DELTA_J: f64 = 1e-6;
/// Floor on `r2` in the ratio.
pub const DELTA_R2: f64 = 1e-6;

const POWER_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-10;
const EM_ITERS: usize = 200;
const EM_REL_TOL: f64 = 1e-9;
const VAR_FLOOR_REL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub r1: f64,
    pub r2: f64,
    pub j: f64,
    pub j_clean: f64,
    pub r: f64,
}

fn pooled(traj: &TrajectoryRecord, t_start: f64, t_end: f64) -> Result<Vec<f64>> {
    let w = traj.window(t_start, t_end);
    if w.is_empty() {
        return Err(Error::Domain(format!("empty evaluation window [{t_start}, {t_end})")));
    }
    Ok(traj.speeds[w].iter().flatten().copied().collect())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation of every vehicle's speed over
/// every timestep in `[t_start, t_end)`.
pub fn pooled_speed_stats(traj: &TrajectoryRecord, t_start: f64, t_end: f64) -> Result<(f64, f64)> {
    Ok(mean_std(&pooled(traj, t_start, t_end)?))
}

/// Time-average of the across-vehicle speed standard deviation.
pub fn cross_vehicle_speed_std(traj: &TrajectoryRecord, t_start: f64, t_end: f64) -> Result<f64> {
    let w = traj.window(t_start, t_end);
    if w.is_empty() {
        return Err(Error::Domain(format!("empty evaluation window [{t_start}, {t_end})")));
    }
    let n = w.len() as f64;
    Ok(traj.speeds[w].iter().map(|s| mean_std(s).1).sum::<f64>() / n)
}

/// `r1 = v_avg / max(v_std, δ_v)`; zero if a crash happened before `t_end`.
pub fn stability(traj: &TrajectoryRecord, t_start: f64, t_end: f64) -> Result<f64> {
    let speeds = pooled(traj, t_start, t_end)?;
    if traj.crash_events.iter().any(|c| c.time < t_end) {
        return Ok(0.0);
    }
    let (avg, std) = mean_std(&speeds);
    Ok(avg / std.max(DELTA_V))
}

/// Projections of the centered rows of `reprs` on their top principal
/// direction, found by power iteration on the scatter matrix from the first
/// coordinate axis. The direction's largest-magnitude entry is positive.
pub fn projection_feature(reprs: &Array2<f64>) -> Result<Vec<f64>> {
    let (n, d) = reprs.dim();
    if n < 2 || d < 1 {
        return Err(Error::DegenerateFeature(format!("need >= 2 samples of dim >= 1, got {n}x{d}")));
    }
    let direction = principal_direction(reprs)?;
    let centered = reprs - &reprs.mean_axis(Axis(0)).expect("n >= 2");
    Ok(centered.dot(&direction).to_vec())
}

pub fn principal_direction(reprs: &Array2<f64>) -> Result<Array1<f64>> {
    let mean = reprs.mean_axis(Axis(0)).ok_or_else(|| Error::DegenerateFeature("no samples".into()))?;
    let centered = reprs - &mean;
    let scatter = centered.t().dot(&centered);
    let trace: f64 = scatter.diag().sum();
    if !(trace > 1e-300) || !trace.is_finite() {
        return Err(Error::DegenerateFeature("representations have zero variance".into()));
    }
    // Scaling by the trace keeps the iterates O(1); squaring the operator
    // five times makes each iteration worth 32 plain ones.
    let mut op = &scatter / trace;
    for _ in 0..5 {
        op = op.dot(&op);
        let t: f64 = op.diag().sum();
        op /= t;
    }
    let d = reprs.ncols();
    let mut v = Array1::zeros(d);
    v[0] = 1.0;
    for _ in 0..POWER_ITERS {
        let mut next = op.dot(&v);
        let norm = next.dot(&next).sqrt();
        if !(norm > 0.0) {
            // The start vector was orthogonal to the leading subspace.
            next = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
        } else {
            next /= norm;
        }
        let change = (&next - &v).mapv(f64::abs).sum();
        v = next;
        if change < POWER_TOL {
            break;
        }
    }
    let pivot = v.iter().copied().fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
    if pivot < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    Ok(v)
}

fn check_feature(w: &[f64]) -> Result<f64> {
    if w.len() < 4 {
        return Err(Error::DegenerateData(format!("need >= 4 feature values, got {}", w.len())));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateData("non-finite feature value".into()));
    }
    let (_, std) = mean_std(w);
    let var = std * std;
    if !(var > 0.0) {
        return Err(Error::DegenerateData("all feature values are equal".into()));
    }
    Ok(var)
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean).powi(2) / var)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Mixture {
    weight: [f64; 2],
    mean: [f64; 2],
    var: [f64; 2],
}

impl Mixture {
    fn loglik(&self, w: &[f64]) -> f64 {
        w.iter()
            .map(|&x| {
                let a = self.weight[0].ln() + normal_logpdf(x, self.mean[0], self.var[0]);
                let b = self.weight[1].ln() + normal_logpdf(x, self.mean[1], self.var[1]);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum()
    }
}

/// Two-component EM from a median split; returns the log-likelihood after
/// the initialization and after every iteration.
pub fn em_two_component(w: &[f64]) -> Result<Vec<f64>> {
    let var_w = check_feature(w)?;
    let floor = VAR_FLOOR_REL * var_w;
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = sorted.split_at(sorted.len() / 2);
    let half = |h: &[f64]| {
        let (m, s) = mean_std(h);
        (m, (s * s).max(floor))
    };
    let ((m0, v0), (m1, v1)) = (half(lo), half(hi));
    let mut mix = Mixture { weight: [0.5, 0.5], mean: [m0, m1], var: [v0, v1] };
    let mut history = vec![mix.loglik(w)];
    let n = w.len() as f64;
    for _ in 0..EM_ITERS {
        let mut nk = [0.0; 2];
        let mut sx = [0.0; 2];
        let mut resp = Vec::with_capacity(w.len());
        for &x in w {
            let a = mix.weight[0].ln() + normal_logpdf(x, mix.mean[0], mix.var[0]);
            let b = mix.weight[1].ln() + normal_logpdf(x, mix.mean[1], mix.var[1]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let r0 = ea / (ea + eb);
            resp.push(r0);
            nk[0] += r0;
            nk[1] += 1.0 - r0;
            sx[0] += r0 * x;
            sx[1] += (1.0 - r0) * x;
        }
        if nk.iter().any(|&c| c <= 0.0) {
            break;
        }
        let mean = [sx[0] / nk[0], sx[1] / nk[1]];
        let mut sv = [0.0; 2];
        for (&x, &r0) in w.iter().zip(&resp) {
            sv[0] += r0 * (x - mean[0]).powi(2);
            sv[1] += (1.0 - r0) * (x - mean[1]).powi(2);
        }
        mix = Mixture {
            weight: [nk[0] / n, nk[1] / n],
            mean,
            var: [(sv[0] / nk[0]).max(floor), (sv[1] / nk[1]).max(floor)],
        };
        let ll = mix.loglik(w);
        let prev = *history.last().unwrap();
        history.push(ll);
        if (ll - prev).abs() < EM_REL_TOL * prev.abs() {
            break;
        }
    }
    Ok(history)
}

/// Maximized log-likelihood of `w` under a `k`-component Gaussian mixture
/// (`k = 1` closed form, `k = 2` by EM).
pub fn gmm_loglik(w: &[f64], k: usize) -> Result<f64> {
    match k {
        1 => {
            let var = check_feature(w)?;
            let n = w.len() as f64;
            Ok(-0.5 * n * (1.0 + (2.0 * std::f64::consts::PI * var).ln()))
        }
        // A single Gaussian is the two-component model with equal parts, so
        // EM stopping early on a near-unimodal sample is floored there.
        2 => Ok(em_two_component(w)?.last().unwrap().max(gmm_loglik(w, 1)?)),
        _ => Err(Error::Domain(format!("gmm_loglik supports k = 1 or 2, got {k}"))),
    }
}

/// `J = -2 (ℓ_1 - ℓ_2)`, clamped at zero.
pub fn lrt_statistic(w: &[f64]) -> Result<f64> {
    let l1 = gmm_loglik(w, 1)?;
    let l2 = gmm_loglik(w, 2)?;
    Ok((2.0 * (l2 - l1)).max(0.0))
}

/// `|J - J_clean| / max(|J_clean|, δ_J)`.
pub fn sensitivity_ratio(j: f64, j_clean: f64) -> f64 {
    (j - j_clean).abs() / j_clean.abs().max(DELTA_J)
}

/// `(r2, J, J_clean)`. Representations are the base network's mean
/// last-hidden-layer activations over the smoothing noise. `J` is computed
/// on the clean-plus-trigger feature and rescaled to the clean sample size,
/// so mixing in copies of the clean inputs leaves it equal to `J_clean`.
pub fn trigger_sensitivity(
    sc: &SmoothedController<'_>,
    clean_obs: &[Observation],
    trig_obs: &[Observation],
) -> Result<(f64, f64, f64)> {
    if clean_obs.len() < 20 || trig_obs.len() < 20 {
        return Err(Error::Domain("trigger_sensitivity needs >= 20 clean and >= 20 trigger inputs".into()));
    }
    let dim = sc.base.hidden_dim();
    let repr_matrix = |obs: &[Observation]| {
        let mut m = Array2::zeros((obs.len(), dim));
        for (i, o) in obs.iter().enumerate() {
            m.row_mut(i).assign(&sc.smooth_repr(o, i as u64));
        }
        m
    };
    let clean = repr_matrix(clean_obs);
    let trig = repr_matrix(trig_obs);
    let mixed = ndarray::concatenate(Axis(0), &[clean.view(), trig.view()]).expect("same width");
    let j_clean = lrt_statistic(&projection_feature(&clean)?)?;
    let j_mixed = lrt_statistic(&projection_feature(&mixed)?)?;
    let j = j_mixed * clean_obs.len() as f64 / mixed.nrows() as f64;
    Ok((sensitivity_ratio(j, j_clean), j, j_clean))
}

/// `r = r1 / max(r2, δ_r2)`.
pub fn ratio(r1: f64, r2: f64) -> f64 {
    r1 / r2.max(DELTA_R2)
}

/// Writes the per-candidate metrics table; `xs[i]` has 3 or 6 entries.
pub fn write_metrics_csv<W: Write>(mut w: W, xs: &[Vec<f64>], records: &[MetricRecord]) -> std::io::Result<()> {
    let with_means = xs.first().is_some_and(|x| x.len() == 6);
    let header = if with_means { "candidate_id,x1,x2,x3,m1,m2,m3,r1,r2,J,J_clean,r" } else { "candidate_id,x1,x2,x3,r1,r2,J,J_clean,r" };
    writeln!(w, "{header}")?;
    for (i, (x, m)) in xs.iter().zip(records).enumerate() {
        let mut fields = vec![i.to_string()];
        fields.extend(x.iter().map(|v| g6(*v)));
        fields.extend([m.r1, m.r2, m.j, m.j_clean, m.r].iter().map(|v| g6(*v)));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}
