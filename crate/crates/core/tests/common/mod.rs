//! Measurements shared by the focused suites and the acceptance run. Each
//! returns the observed statistic; callers decide the threshold.

#![allow(dead_code)]

use avguard::controller::ControllerNet;
use avguard::sim::Observation;
use avguard::smoothing::{NoiseParams, SmoothedController};
use avguard::density::{parameter_box, value_loss, value_loss_grad, ValueFn, ValueFnSample};
use avguard::metrics::{em_two_component, gmm_loglik, principal_direction};
use avguard::nn::{Grads, Mlp};
use avguard::sampler::{accept_prob, attempt, classical_samples, sample_optimal, ProposalBox, SamplerConfig, SamplerState};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---- gradients ----

const H: f64 = 1e-4;

fn flatten(g: &Grads) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in g.weights.iter().zip(&g.biases) {
        out.extend(w.iter());
        out.extend(b.iter());
    }
    out
}

/// `|a - fd| / max(|a|, |fd|)` over the whole gradient vector, with `fd`
/// the central differences of `f` at step 1e-4.
fn gradient_error(net: &Mlp, analytic: &Grads, mut f: impl FnMut(&Mlp) -> f64) -> f64 {
    let analytic = flatten(analytic);
    let p0 = net.params();
    assert_eq!(p0.len(), analytic.len());
    let mut probe = net.clone();
    let mut fd = Vec::with_capacity(p0.len());
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] = p0[i] + H;
        probe.set_params(&p);
        let up = f(&probe);
        p[i] = p0[i] - H;
        probe.set_params(&p);
        let down = f(&probe);
        fd.push((up - down) / (2.0 * H));
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&fd).map(|(a, b)| a - b));
    diff / norm(&mut analytic.iter().copied()).max(norm(&mut fd.iter().copied()))
}

pub fn random_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| normal(&mut rng))
}

/// Gradient of the summed controller output, for a few initializations.
pub fn output_gradient_error(seed: u64) -> f64 {
    let net = Mlp::new(&[3, 32, 32, 1], seed).unwrap();
    let x = random_inputs(16, 3, 100 + seed);
    let g = net.backward(&net.forward_trace(x.view()), &Array2::ones((16, 1)));
    gradient_error(&net, &g, |m| m.forward(x.view()).sum())
}

/// Gradient of the controller's mean squared error.
pub fn mse_gradient_error() -> f64 {
    let net = Mlp::new(&[3, 32, 32, 1], 9).unwrap();
    let x = random_inputs(24, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = Array2::from_shape_fn((24, 1), |_| rng.random_range(-1.0..1.0));
    let trace = net.forward_trace(x.view());
    let d_out = (trace.output() - &t) * (2.0 / 24.0);
    let g = net.backward(&trace, &d_out);
    gradient_error(&net, &g, |m| (&m.forward(x.view()) - &t).mapv(|e| e * e).mean().unwrap())
}

/// Gradient of the surrogate's regularized loss at weight `lambda`.
pub fn value_loss_gradient_error(lambda: f64) -> f64 {
    let b = parameter_box(6).unwrap();
    let mut vf = ValueFn::new(b.clone(), &[16, 16], 3.0, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples: Vec<ValueFnSample> =
        (0..30).map(|_| ValueFnSample { x: b.sample(&mut rng), r: rng.random_range(0.0..4.0) }).collect();
    let (loss, g) = value_loss_grad(&vf, &samples, lambda);
    assert!((loss - value_loss(&vf, &samples, lambda)).abs() < 1e-12);
    let mlp = vf.mlp.clone();
    gradient_error(&mlp, &g, |m| {
        vf.mlp = m.clone();
        value_loss(&vf, &samples, lambda)
    })
}

pub fn worst_gradient_error() -> f64 {
    let mut all = vec![mse_gradient_error(), value_loss_gradient_error(0.0), value_loss_gradient_error(1e-2)];
    all.extend((0..3).map(output_gradient_error));
    all.into_iter().fold(0.0, f64::max)
}

// ---- principal direction ----

/// Largest distance (up to sign) between the power-iteration direction and
/// the dense eigensolver's top eigenvector over `cases` random 50x8
/// matrices.
pub fn eigen_oracle_distance(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let x = Array2::from_shape_fn((50, 8), |_| normal(&mut rng));
        let v = principal_direction(&x).unwrap();
        let m = DMatrix::from_row_slice(50, 8, x.as_slice().unwrap());
        let mean = m.row_mean();
        let centered = DMatrix::from_fn(50, 8, |i, j| m[(i, j)] - mean[j]);
        let eig = SymmetricEigen::new(centered.transpose() * &centered);
        let u = eig.eigenvectors.column(eig.eigenvalues.imax());
        let plus: f64 = (0..8).map(|j| (v[j] - u[j]).powi(2)).sum::<f64>().sqrt();
        let minus: f64 = (0..8).map(|j| (v[j] + u[j]).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(plus.min(minus));
    }
    worst
}

// ---- EM and the likelihood-ratio statistic ----

pub fn feature_corpus() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..100)
        .map(|k| {
            let n = rng.random_range(20..400);
            let sep = rng.random_range(0.0..8.0);
            let frac = rng.random_range(0.1..0.9);
            (0..n)
                .map(|_| match k % 3 {
                    0 => normal(&mut rng) + if rng.random_bool(frac) { sep } else { 0.0 },
                    1 => normal(&mut rng) * rng.random_range(0.1..3.0),
                    _ => (normal(&mut rng) * 0.7).exp(),
                })
                .collect()
        })
        .collect()
}

/// Vectors of the corpus on which some EM iteration lowered the
/// log-likelihood (beyond 1e-10 relative) or the two-component fit fell
/// below the one-component fit.
pub fn em_violations() -> Vec<usize> {
    feature_corpus()
        .iter()
        .enumerate()
        .filter(|(_, w)| {
            let hist = em_two_component(w).unwrap();
            let drops = hist.windows(2).any(|it| it[1] < it[0] - 1e-10 * it[0].abs());
            drops || gmm_loglik(w, 2).unwrap() < gmm_loglik(w, 1).unwrap() - 1e-9
        })
        .map(|(k, _)| k)
        .collect()
}

/// Plain two-component EM written independently of the library: same
/// median-split start, variance floor and stopping rule, direct densities
/// instead of log-sum-exp.
pub fn oracle_j(w: &[f64]) -> f64 {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let l0 = -0.5 * n * (1.0 + (2.0 * std::f64::consts::PI * var).ln());

    let floor = 1e-6 * var;
    let mut s = w.to_vec();
    s.sort_by(f64::total_cmp);
    let (lo, hi) = s.split_at(s.len() / 2);
    let mv = |h: &[f64]| {
        let m = h.iter().sum::<f64>() / h.len() as f64;
        (m, (h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / h.len() as f64).max(floor))
    };
    let ((mut m0, mut v0), (mut m1, mut v1)) = (mv(lo), mv(hi));
    let (mut p0, mut p1) = (0.5, 0.5);
    let pdf = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let ll = |p0: f64, m0: f64, v0: f64, p1: f64, m1: f64, v1: f64| {
        w.iter().map(|&x| (p0 * pdf(x, m0, v0) + p1 * pdf(x, m1, v1)).ln()).sum::<f64>()
    };
    let mut prev = ll(p0, m0, v0, p1, m1, v1);
    for _ in 0..200 {
        let r: Vec<f64> = w
            .iter()
            .map(|&x| {
                let a = p0 * pdf(x, m0, v0);
                a / (a + p1 * pdf(x, m1, v1))
            })
            .collect();
        let n0: f64 = r.iter().sum();
        let n1 = n - n0;
        m0 = w.iter().zip(&r).map(|(x, r)| r * x).sum::<f64>() / n0;
        m1 = w.iter().zip(&r).map(|(x, r)| (1.0 - r) * x).sum::<f64>() / n1;
        v0 = (w.iter().zip(&r).map(|(x, r)| r * (x - m0).powi(2)).sum::<f64>() / n0).max(floor);
        v1 = (w.iter().zip(&r).map(|(x, r)| (1.0 - r) * (x - m1).powi(2)).sum::<f64>() / n1).max(floor);
        p0 = n0 / n;
        p1 = n1 / n;
        let cur = ll(p0, m0, v0, p1, m1, v1);
        let done = (cur - prev).abs() < 1e-9 * prev.abs();
        prev = cur;
        if done {
            break;
        }
    }
    (2.0 * (prev - l0)).max(0.0)
}

/// 400 unit-variance draws split evenly between -5 and +5.
pub fn bimodal_fixture() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..400).map(|i| normal(&mut rng) + if i % 2 == 0 { -5.0 } else { 5.0 }).collect()
}

/// 400 standard normal draws.
pub fn unimodal_fixture() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    (0..400).map(|_| normal(&mut rng)).collect()
}

/// Values of the statistic on the two fixtures, recorded from the oracle.
pub const J_BIMODAL: f64 = 753.864785366978;
pub const J_UNIMODAL: f64 = 0.788399122843;

// ---- sampler ----

pub const BINS: usize = 20;

/// Triangle on [0, 1] peaking at 1/2; integrates to 1/2.
pub fn triangle(x: &[f64]) -> f64 {
    1.0 - (2.0 * x[0] - 1.0).abs()
}

pub fn bin_of(x: f64, bins: usize) -> usize {
    ((x * bins as f64) as usize).min(bins - 1)
}

/// Midpoint-rule integral of `f` over bin `b` of `bins` on [0, 1].
pub fn integrate_bin(b: usize, bins: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (lo, w) = (b as f64 / bins as f64, 1.0 / bins as f64);
    let k = 2000;
    (0..k).map(|i| f(lo + (i as f64 + 0.5) * w / k as f64)).sum::<f64>() * w / k as f64
}

/// Probability that one attempt at `x` is accepted with `a` held fixed:
/// `P(a + (1 - a) u <= α)`.
pub fn accept_rate(x: f64, m: f64, a: f64) -> f64 {
    let alpha = accept_prob(triangle(&[x]), 1.0, m, a).unwrap();
    ((alpha - a) / (1.0 - a)).clamp(0.0, 1.0)
}

/// Accepted counts per bin over `n` attempts on the triangle with `a`
/// frozen.
pub fn fixed_a_counts(a: f64, m: f64, n: usize, bins: usize, seed: u64) -> Vec<f64> {
    let q = ProposalBox::unit(1).unwrap();
    let mut state = SamplerState::new(m).unwrap();
    state.a = a;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0.0; bins];
    for _ in 0..n {
        let e = attempt(&triangle, &q, &state, &mut rng).unwrap();
        assert_eq!(e.accepted, e.t <= e.alpha);
        if e.accepted {
            counts[bin_of(e.x[0], bins)] += 1.0;
        }
    }
    counts
}

/// Total variation between `n` classical rejection samples of the
/// triangle and the normalized triangle, on 20 bins.
pub fn classical_tv(n: usize, seed: u64) -> f64 {
    let q = ProposalBox::unit(1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = classical_samples(&triangle, &q, 1.2, n, u64::MAX, &mut rng).unwrap();
    assert_eq!(xs.len(), n);
    let mut hist = vec![0.0; BINS];
    for x in &xs {
        hist[bin_of(x[0], BINS)] += 1.0 / n as f64;
    }
    (0..BINS).map(|b| (hist[b] - 2.0 * integrate_bin(b, BINS, |x| triangle(&[x]))).abs()).sum::<f64>() / 2.0
}

/// Least-squares fit of `y` on `x`: `(slope, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxy / sxx, sxy * sxy / (sxx * syy))
}

#[derive(Debug, Clone, Copy)]
pub struct AffineFit {
    pub bins: usize,
    pub slope: f64,
    pub r2: f64,
    /// `1 / (M (1 - a)^2)`, the slope for a uniform proposal.
    pub expected_slope: f64,
}

/// Accepted density against `p̃` at fixed `a` over 10^5 attempts with
/// `M = max p̃`. Acceptance is positive where α > a, i.e.
/// `p̃ > a M q (2 - a)`; the law is affine there, so only bins entirely
/// inside are regressed.
pub fn affine_law(a: f64, seed: u64) -> AffineFit {
    let (m, bins, n) = (1.0, 100, 100_000);
    let counts = fixed_a_counts(a, m, n, bins, seed);
    let cut = a * m * (2.0 - a);
    let width = 1.0 / bins as f64;
    let (mut px, mut dens) = (Vec::new(), Vec::new());
    for b in 0..bins {
        let (lo, hi) = (b as f64 * width, (b + 1) as f64 * width);
        if triangle(&[lo]).min(triangle(&[hi])) > cut {
            px.push(integrate_bin(b, bins, |x| triangle(&[x])) / width);
            dens.push(counts[b] / n as f64 / width);
        }
    }
    let (slope, r2) = linear_fit(&px, &dens);
    AffineFit { bins: px.len(), slope, r2, expected_slope: 1.0 / (m * (1.0 - a).powi(2)) }
}

/// Gaussian bump of width 0.05 on [0, 1].
pub fn bump(center: f64) -> impl Fn(&[f64]) -> f64 {
    move |x: &[f64]| (-(x[0] - center).powi(2) / (2.0 * 0.05f64.powi(2))).exp()
}

/// Final samples of 100 seeded progressive-sampler runs on `p`.
pub fn sampler_endpoints(p: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let q = ProposalBox::unit(1).unwrap();
    (0..100)
        .map(|s| {
            let out = sample_optimal(&p, &q, &SamplerConfig::default(), &[], &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            assert!(!out.fallback);
            out.x[0]
        })
        .collect()
}

/// Runs of [`sampler_endpoints`] ending within 0.05 of any of `modes`.
pub fn mode_hits(p: &dyn Fn(&[f64]) -> f64, modes: &[f64]) -> usize {
    sampler_endpoints(p).iter().filter(|x| modes.iter().any(|m| (*x - m).abs() <= 0.05)).count()
}

// ---- smoothing robustness ----

/// Largest `|F(x + δ) - F(x)|` over `probes` and the 8 corners of the box
/// `|δ_i| <= rel * scales_i`. Both sides share the noise draws, so the
/// difference is not swamped by Monte-Carlo error.
pub fn robustness_gap(net: &ControllerNet, noise: NoiseParams, probes: &[Observation], rel: f64, n_mc: usize) -> f64 {
    let scales = noise.scales;
    let smoothed = SmoothedController::new(net, noise, n_mc, 0x0b).unwrap();
    let mut worst = 0.0f64;
    for (i, obs) in probes.iter().enumerate() {
        let f0 = smoothed.smooth_action(obs, i as u64);
        for corner in 0..8 {
            let mut x = obs.to_array();
            for d in 0..3 {
                let sign = if corner >> d & 1 == 1 { 1.0 } else { -1.0 };
                x[d] += sign * rel * scales[d];
            }
            let f = smoothed.smooth_action(&Observation::from_array(x), i as u64);
            worst = worst.max((f - f0).abs());
        }
    }
    worst
}
