//! Progressive rejection sampling on a two-bump density over [0, 1]^2. The
//! acceptance threshold `a` rises with each accepted sample, so the chain
//! climbs toward a mode instead of reproducing the density, and stalls once
//! only a thin sliver near the top can still be accepted.
//!
//! ```text
//! cargo run --example progressive_sampler
//! ```

use avguard::sampler::{classical_samples, estimate_m, sample_optimal, ProposalBox, SamplerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bumps(x: &[f64]) -> f64 {
    let g = |cx: f64, cy: f64, h: f64| h * (-((x[0] - cx).powi(2) + (x[1] - cy).powi(2)) / 0.02).exp();
    g(0.25, 0.7, 1.0) + g(0.7, 0.3, 0.6)
}

fn main() -> avguard::Result<()> {
    let q = ProposalBox::unit(2)?;
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let (m, _) = estimate_m(&bumps, &q, 4096, cfg.safety, &[])?;
    let plain = classical_samples(&bumps, &q, m, 2000, 1_000_000, &mut rng)?;
    let near_big = plain.iter().filter(|x| (x[0] - 0.25).abs() < 0.15 && (x[1] - 0.7).abs() < 0.15).count();
    println!("classical rejection: {near_big}/{} samples near the taller bump", plain.len());

    for seed in 0..5 {
        let out = sample_optimal(&bumps, &q, &cfg, &[], &mut ChaCha8Rng::seed_from_u64(seed))?;
        let accepted = out.trace.entries.iter().filter(|e| e.accepted).count();
        println!(
            "seed {seed}: x = ({:.3}, {:.3}), p = {:.3}, a = {:.4}, {accepted} accepted of {} attempts, stop {:?}",
            out.x[0],
            out.x[1],
            bumps(&out.x),
            out.state.a,
            out.trace.entries.len(),
            out.stop
        );
    }
    Ok(())
}
