//! Surrogate value function on synthetic targets with a known answer.

use avguard::density::{fit_value_fn, parameter_box, FitHyper, ValueFn, ValueFnSample};
use avguard::sampler::{Density, ProposalBox};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CENTER: [f64; 3] = [0.3, 0.6, 0.5];

fn bump(x: &[f64]) -> f64 {
    let d2: f64 = x.iter().zip(CENTER).map(|(a, c)| (a - c).powi(2)).sum();
    3.0 * (-d2 / (2.0 * 0.2f64.powi(2))).exp()
}

fn pool(b: &ProposalBox, n: usize, seed: u64, r: impl Fn(&[f64]) -> f64) -> Vec<ValueFnSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = b.sample(&mut rng);
            ValueFnSample { r: r(&x), x }
        })
        .collect()
}

fn assert_positive(vf: &ValueFn) -> Vec<(Vec<f64>, f64)> {
    let grid = vf.bounds.grid(10_000);
    assert!(grid.len() >= 10_000);
    let p = vf.eval_batch(&grid);
    for (x, v) in grid.iter().zip(&p) {
        assert!(v.is_finite() && *v > 0.0, "p̃({x:?}) = {v}");
    }
    grid.into_iter().zip(p).collect()
}

#[test]
fn learns_a_gaussian_bump() {
    let b = parameter_box(3).unwrap();
    let samples = pool(&b, 200, 1, bump);
    let (vf, report) = fit_value_fn(&samples, &b, &FitHyper::default()).unwrap();

    let mean = samples.iter().map(|s| s.r).sum::<f64>() / 200.0;
    let var = samples.iter().map(|s| (s.r - mean).powi(2)).sum::<f64>() / 200.0;
    let mse = report.holdout_mse.unwrap();
    assert!(mse < 0.05 * var, "held-out mse {mse} vs target variance {var}");

    let grid = assert_positive(&vf);
    let (arg, _) = grid.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let dist = arg.iter().zip(CENTER).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    assert!(dist <= 0.1, "argmax {arg:?} is {dist} from the center");
}

#[test]
fn six_dimensional_surrogate_stays_positive() {
    let b = parameter_box(6).unwrap();
    // A target that is exactly zero on most of the box pushes softplus
    // towards its floor.
    let samples = pool(&b, 120, 2, |x| (1.0 - 4.0 * (x[0] - 0.2).powi(2) - x[3].abs()).max(0.0));
    let hyper = FitHyper { epochs: 300, ..FitHyper::default() };
    let (vf, _) = fit_value_fn(&samples, &b, &hyper).unwrap();
    assert_positive(&vf);
}
