//! Systematic resampling of a weighted particle population: what it changes,
//! what it preserves, and what it costs.
//!
//!     cargo run -p combinfer --example resampling
//!
//! A batch of particles with very uneven weights carries little information
//! (low effective sample size). `resample` redraws the population in
//! proportion to the weights: afterwards every particle carries the same
//! weight (the incoming mean, so normalizer estimates are untouched) and the
//! survivors concentrate on the high-weight ancestors. The price is duplicate
//! particles; the gain is that further steps spend their budget where the
//! mass is.

use combinfer::dist;
use combinfer::{ess_fraction, log_z_hat, PrimitiveProgram, Program, RandomStream, Session, Value};

/// x ~ N(0, 1) weighted by exp(2.5 x): a deliberately skewed population.
fn skewed() -> PrimitiveProgram {
    PrimitiveProgram::new("skewed", 0, |scope, _| {
        let x = scope.sample("x", dist::normal(0.0, 1.0))?;
        scope.factor_at("tilt", x.mul(&Value::scalar(2.5))?)?;
        Ok(vec![x])
    })
}

fn run(program: &Program, particles: usize, seed: u64) -> combinfer::Result<(Vec<f64>, Vec<f64>)> {
    let mut session =
        Session::new(RandomStream::seeded(seed, 0)).with_sample_shape(vec![particles]);
    let out = program.run(&[], &mut session)?;
    let x = out.trace.get(&"x".into()).unwrap().data().data().to_vec();
    let w = out.log_weight.value().data().data().to_vec();
    Ok((x, w))
}

fn weighted_mean(x: &[f64], log_w: &[f64]) -> f64 {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (xi, lw) in x.iter().zip(log_w) {
        let w = (lw - m).exp();
        num += w * xi;
        den += w;
    }
    num / den
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let particles = 1_000;
    let seed = 5;

    let before = Program::from(skewed());
    let after = Program::resample(skewed().into(), 0)?;

    // Both runs consume the stream identically (the resampler draws its one
    // uniform after the particles), so they see the same population.
    let (x0, w0) = run(&before, particles, seed)?;
    let (x1, w1) = run(&after, particles, seed)?;

    let lw0 = Value::vector(w0.clone());
    let lw1 = Value::vector(w1.clone());
    println!("before resampling:");
    println!("  log Z_hat     {:+.4}  (truth {:+.4} = 2.5^2/2)", log_z_hat(&lw0), 2.5f64 * 2.5 / 2.0);
    println!("  ESS fraction  {:.4}", ess_fraction(&lw0));
    println!("  weighted mean {:+.4}  (truth +2.5)", weighted_mean(&x0, &w0));

    let unique = {
        let mut xs = x1.clone();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup();
        xs.len()
    };
    println!("\nafter resampling:");
    println!("  log Z_hat     {:+.4}  (every outgoing weight is the incoming mean)", log_z_hat(&lw1));
    println!("  ESS fraction  {:.4}  (weights are uniform now)", ess_fraction(&lw1));
    println!("  weighted mean {:+.4}  (plain average; selection replaced weighting)", weighted_mean(&x1, &w1));
    println!("  unique ancestors surviving: {unique} of {particles}");

    // Offspring counts follow the normalized weights: the heaviest incoming
    // particles get the most copies, each within one of its expectation.
    let m = w0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = w0.iter().map(|lw| (lw - m).exp()).sum();
    let mut by_weight: Vec<usize> = (0..particles).collect();
    by_weight.sort_by(|&a, &b| w0[b].partial_cmp(&w0[a]).unwrap());
    println!("\n  heaviest ancestors  weight share  offspring (expected)");
    for &i in by_weight.iter().take(5) {
        let share = (w0[i] - m).exp() / total;
        let copies = x1.iter().filter(|&&v| v == x0[i]).count();
        println!(
            "    x = {:+.3}         {:.3}         {} ({:.2})",
            x0[i],
            share,
            copies,
            particles as f64 * share
        );
    }
    Ok(())
}
