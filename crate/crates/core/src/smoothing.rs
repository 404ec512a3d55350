//! Randomized smoothing of the AV controller: the smoothed action is the
//! Monte-Carlo mean of the base network over Gaussian-perturbed inputs.
//!
//! Noise parameters are searched in normalized units: the physical standard
//! deviation of dimension `i` is `std_norm[i] * scales[i]`, where the scales
//! are the mean absolute values of the genuine observations.

use ndarray::{Array1, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::{clip_physical, ControllerNet, Dataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::sim::{AvPolicy, Observation};

/// Normalized noise means live in `[-MEAN_BOUND, MEAN_BOUND]`.
pub const MEAN_BOUND: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub std_norm: [f64; 3],
    pub mean_norm: Option<[f64; 3]>,
    pub scales: [f64; 3],
}

impl NoiseParams {
    pub fn zero(scales: [f64; 3]) -> Self {
        Self { std_norm: [0.0; 3], mean_norm: None, scales }
    }

    /// From a search vector: 3 stds, or 3 stds followed by 3 means.
    pub fn from_vector(x: &[f64], scales: [f64; 3]) -> Result<Self> {
        let p = match x.len() {
            3 => Self { std_norm: [x[0], x[1], x[2]], mean_norm: None, scales },
            6 => Self { std_norm: [x[0], x[1], x[2]], mean_norm: Some([x[3], x[4], x[5]]), scales },
            n => return Err(Error::Domain(format!("noise vector must have 3 or 6 entries, got {n}"))),
        };
        p.physical()?;
        Ok(p)
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.std_norm.to_vec();
        if let Some(m) = self.mean_norm {
            v.extend(m);
        }
        v
    }

    /// Physical `(mu, sigma)`.
    pub fn physical(&self) -> Result<([f64; 3], [f64; 3])> {
        denormalize_noise(&self.std_norm, self.mean_norm.as_ref(), &self.scales)
    }
}

pub fn denormalize_noise(
    std_norm: &[f64; 3],
    mean_norm: Option<&[f64; 3]>,
    scales: &[f64; 3],
) -> Result<([f64; 3], [f64; 3])> {
    if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Domain(format!("scales must be positive, got {scales:?}")));
    }
    if std_norm.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Domain(format!("normalized stds must lie in [0, 1], got {std_norm:?}")));
    }
    let sigma = [0, 1, 2].map(|i| std_norm[i] * scales[i]);
    let mu = match mean_norm {
        None => [0.0; 3],
        Some(m) => {
            if m.iter().any(|v| !(-MEAN_BOUND..=MEAN_BOUND).contains(v)) {
                return Err(Error::Domain(format!("normalized means must lie in [-0.2, 0.2], got {m:?}")));
            }
            [0, 1, 2].map(|i| m[i] * scales[i])
        }
    };
    Ok((mu, sigma))
}

/// Mean absolute value of each observation dimension over the genuine rows.
pub fn compute_scales(genuine: &Dataset) -> Result<[f64; 3]> {
    let rows: Vec<[f64; 3]> = genuine.genuine().map(|r| r.obs.to_array()).collect();
    if rows.is_empty() {
        return Err(Error::Config("compute_scales needs genuine rows".into()));
    }
    let n = rows.len() as f64;
    Ok([0, 1, 2].map(|d| rows.iter().map(|r| r[d].abs()).sum::<f64>() / n))
}

#[derive(Debug, Clone)]
pub struct SmoothedController<'a> {
    pub base: &'a ControllerNet,
    pub noise: NoiseParams,
    pub n_mc: usize,
    pub seed_base: u64,
    mu: [f64; 3],
    sigma: [f64; 3],
}

impl<'a> SmoothedController<'a> {
    pub fn new(base: &'a ControllerNet, noise: NoiseParams, n_mc: usize, seed_base: u64) -> Result<Self> {
        if n_mc == 0 {
            return Err(Error::Config("n_mc must be >= 1".into()));
        }
        let (mu, sigma) = noise.physical()?;
        Ok(Self { base, noise, n_mc, seed_base, mu, sigma })
    }

    pub fn is_noiseless(&self) -> bool {
        self.mu.iter().chain(&self.sigma).all(|v| *v == 0.0)
    }

    /// The `n_mc` perturbed, clipped copies of `obs` for one stream. The
    /// standard-normal draws depend only on `(seed_base, key)`, so every
    /// noise setting sees the same underlying randomness.
    pub fn perturbed(&self, obs: &Observation, key: &[u64]) -> Vec<[f64; 3]> {
        let mut rng = rng::stream(self.seed_base, key);
        let x = obs.to_array();
        (0..self.n_mc)
            .map(|_| {
                let mut p = [0.0; 3];
                for d in 0..3 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p[d] = x[d] + self.mu[d] + self.sigma[d] * z;
                }
                clip_physical(p)
            })
            .collect()
    }

    /// `(1/n_mc) Σ_k base(obs + ε_k)` with the noise stream keyed by the
    /// simulation step.
    pub fn smooth_action(&self, obs: &Observation, step_index: u64) -> f64 {
        if self.is_noiseless() {
            return self.base.forward(obs);
        }
        let xs = self.perturbed(obs, &[0x5a, step_index]);
        self.base.forward_batch(&xs).iter().sum::<f64>() / self.n_mc as f64
    }

    /// Mean last-hidden-layer representation over the noise draws for
    /// probe `probe_index`.
    pub fn smooth_repr(&self, obs: &Observation, probe_index: u64) -> Array1<f64> {
        if self.is_noiseless() {
            return Array1::from(self.base.hidden_repr(obs));
        }
        let xs = self.perturbed(obs, &[0x4e, probe_index]);
        self.base.hidden_batch(&xs).mean_axis(Axis(0)).expect("n_mc >= 1")
    }
}

impl AvPolicy for SmoothedController<'_> {
    fn accel(&self, obs: &Observation, step: u64) -> Result<f64> {
        Ok(self.smooth_action(obs, step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{Row, Tag};
    use crate::nn::Mlp;

    fn linear_net(c: [f64; 3]) -> ControllerNet {
        // 3 -> 1 -> 1 with a near-linear tanh region would not be exact, so
        // use a tiny hidden layer in its linear regime and undo the gain.
        let mut mlp = Mlp::zeros(&[3, 1, 1]);
        let eps = 1e-4;
        for d in 0..3 {
            mlp.weights[0][[d, 0]] = c[d] * eps;
        }
        mlp.weights[1][[0, 0]] = 1.0 / eps;
        ControllerNet::new(mlp, [0.0; 3], [1.0; 3]).unwrap()
    }

    #[test]
    fn denormalization() {
        let s = [3.8, 3.8, 5.0];
        assert_eq!(denormalize_noise(&[0.0; 3], None, &s).unwrap(), ([0.0; 3], [0.0; 3]));
        let (_, sigma) = denormalize_noise(&[0.1, 0.1, 0.4], None, &s).unwrap();
        for (a, b) in sigma.iter().zip([0.38, 0.38, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(denormalize_noise(&[1.0; 3], None, &s).unwrap().1, s);
        let (mu, _) = denormalize_noise(&[0.0; 3], Some(&[0.1, -0.2, 0.0]), &s).unwrap();
        assert!((mu[0] - 0.38).abs() < 1e-12 && (mu[1] + 0.76).abs() < 1e-12);
        assert!(denormalize_noise(&[1.1, 0.0, 0.0], None, &s).is_err());
        assert!(denormalize_noise(&[0.0; 3], Some(&[0.3, 0.0, 0.0]), &s).is_err());
    }

    #[test]
    fn scales_are_mean_absolute_values() {
        let row = |a: f64| Row { obs: Observation::new(a, 2.2, 1.9), accel: 0.0, tag: Tag::Genuine };
        let d = Dataset { rows: vec![row(1.0), row(3.0)] };
        assert_eq!(compute_scales(&d).unwrap(), [2.0, 2.2, 1.9]);
        let same = Dataset { rows: vec![row(3.8), row(3.8)] };
        assert_eq!(compute_scales(&same).unwrap(), [3.8, 2.2, 1.9]);
    }

    #[test]
    fn zero_noise_is_the_base_network() {
        let net = ControllerNet::new(Mlp::new(&[3, 8, 8, 1], 3).unwrap(), [3.0, 3.0, 6.0], [1.0, 1.0, 2.0]).unwrap();
        let obs = Observation::new(3.1, 2.9, 4.4);
        for n_mc in [1, 7, 100] {
            let sc = SmoothedController::new(&net, NoiseParams::zero([3.0, 3.0, 6.0]), n_mc, 1).unwrap();
            assert_eq!(sc.smooth_action(&obs, 5).to_bits(), net.forward(&obs).to_bits());
        }
    }

    #[test]
    fn linear_map_expectation() {
        // E[c · (x + ε)] = c · x for zero-mean ε; the MC standard error is
        // sqrt(Σ c_i² σ_i² / n).
        let c = [0.2, -0.1, 0.05];
        let net = linear_net(c);
        let scales = [4.0, 4.0, 8.0];
        let noise = NoiseParams { std_norm: [0.05, 0.05, 0.1], mean_norm: None, scales };
        let n_mc = 100_000;
        let sc = SmoothedController::new(&net, noise, n_mc, 9).unwrap();
        let obs = Observation::new(4.0, 4.0, 8.0);
        let expect: f64 = (0..3).map(|d| c[d] * obs.to_array()[d]).sum();
        let (_, sigma) = noise.physical().unwrap();
        let se = ((0..3).map(|d| (c[d] * sigma[d]).powi(2)).sum::<f64>() / n_mc as f64).sqrt();
        let got = sc.smooth_action(&obs, 0);
        assert!((got - expect).abs() < 3.0 * se + 1e-6, "{got} vs {expect} (se {se})");
    }

    #[test]
    fn deterministic_per_step() {
        let net = ControllerNet::new(Mlp::new(&[3, 4, 4, 1], 2).unwrap(), [0.0; 3], [1.0; 3]).unwrap();
        let noise = NoiseParams { std_norm: [0.2, 0.2, 0.2], mean_norm: None, scales: [1.0; 3] };
        let sc = SmoothedController::new(&net, noise, 50, 4).unwrap();
        let obs = Observation::new(1.0, 1.0, 2.0);
        assert_eq!(sc.smooth_action(&obs, 3).to_bits(), sc.smooth_action(&obs, 3).to_bits());
        assert_ne!(sc.smooth_action(&obs, 3), sc.smooth_action(&obs, 4));
    }
}
