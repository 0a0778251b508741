//! Building a bridged importance sampler out of the four combinators, by
//! hand, with fixed (untrained) kernels.
//!
//!     cargo run --release -p combinfer --example nested_proposals
//!
//! The target is a sharp two-mode mixture; the start distribution is a broad
//! Gaussian. Jumping straight from start to target squeezes all the weight
//! variance into one increment. Inserting an intermediate tempered density
//! splits it across two smaller jumps: each step is
//!
//!     propose(extend(next_density, reverse_kernel),
//!             compose(forward_kernel, previous_sampler))
//!
//! and the incremental weights telescope into a properly weighted estimate of
//! the same normalizer (1: both endpoint densities are normalized).
//!
//! Watch the printed numbers, because they make a pointed argument. The
//! bridge alone does NOT improve the effective sample size: with fixed
//! random-walk kernels the two increments' variances simply compound.
//! Resampling between the jumps is what converts smaller per-step variance
//! into a better population. Training the kernels so each increment is nearly
//! flat is the other half of the story; the `anneal_ring` example does both.

use std::sync::Arc;

use combinfer::dist::{self, Distribution};
use combinfer::experiments::gibbs::IncrementRecorder;
use combinfer::{
    ess_fraction, log_z_hat, PrimitiveProgram, Program, RandomStream, SampleMode, Session, Value,
};

const MODE: f64 = 3.0;
const MODE_STD: f64 = 0.3;
const START_STD: f64 = 3.0;

/// log of the mixture density 0.5 N(-3, 0.3) + 0.5 N(3, 0.3).
fn log_mixture(x: &Value) -> combinfer::Result<Value> {
    let lp_a = Distribution::normal(Value::scalar(-MODE), Value::scalar(MODE_STD))?.log_prob(x)?;
    let lp_b = Distribution::normal(Value::scalar(MODE), Value::scalar(MODE_STD))?.log_prob(x)?;
    // Stable two-term log-sum-exp; max(a, b) = a + relu(b - a).
    let m = lp_a.add(&lp_b.sub(&lp_a)?.relu())?;
    let half = Value::scalar(0.5);
    let inner = lp_a.sub(&m)?.exp().mul(&half)?.add(&lp_b.sub(&m)?.exp().mul(&half)?)?;
    m.add(&inner.log())
}

/// Density at inverse temperature beta on the geometric path from the start
/// Gaussian to the mixture, with the level's own latent address.
fn tempered(level: usize, beta: f64) -> PrimitiveProgram {
    PrimitiveProgram::new(&format!("level{level}"), 0, move |scope, _| {
        let start = dist::normal(0.0, START_STD);
        let x = scope.sample(format!("x/{level}"), start.clone())?;
        if beta > 0.0 {
            let tilt = log_mixture(&x)?.sub(&start.log_prob(&x)?)?;
            scope.factor(tilt.mul(&Value::scalar(beta))?)?;
        }
        Ok(vec![x])
    })
}

/// Gaussian random-walk kernel writing the next level's address.
fn walk_kernel(name: &str, level: usize, std: f64) -> PrimitiveProgram {
    let address = format!("x/{level}");
    PrimitiveProgram::new(name, 1, move |scope, inputs| {
        let d = Distribution::normal(inputs[0].clone(), Value::scalar(std))?;
        Ok(vec![scope.sample(address.as_str(), d)?])
    })
}

/// One annealing move: reweight the previous sampler toward `beta`, moving
/// particles with a forward kernel and absorbing them with a reverse kernel.
fn bridge_step(level: usize, beta: f64, previous: Program) -> combinfer::Result<Program> {
    let target = Program::extend(
        tempered(level, beta).into(),
        walk_kernel(&format!("rev{level}"), level - 1, 0.8),
    )?;
    let proposal =
        Program::compose(walk_kernel(&format!("fwd{level}"), level, 0.8).into(), previous);
    Program::propose_labeled(target, proposal, level as u32)
}

fn report(name: &str, program: &Program, particles: usize) -> combinfer::Result<()> {
    let recorder = Arc::new(IncrementRecorder::default());
    let mut session = Session::new(RandomStream::seeded(11, 0))
        .with_sample_shape(vec![particles])
        .with_mode(SampleMode::Detached)
        .with_objective(recorder.clone());
    let out = program.run(&[], &mut session)?;
    let w = out.log_weight.value();
    println!("{name}");
    println!("  shape     {}", program.render());
    println!("  log Z_hat {:+.4} (truth 0), ESS fraction {:.3}", log_z_hat(w), ess_fraction(w));
    for (label, incr) in recorder.records.lock().unwrap().iter() {
        let n = incr.len() as f64;
        let mean = incr.iter().sum::<f64>() / n;
        let var = incr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        println!(
            "  step {:?}: incremental weight mean {:+.3}, std {:.3}",
            label.unwrap_or(0),
            mean,
            var.sqrt()
        );
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let particles = 2_000;

    // One hard jump: importance weighting straight from the start Gaussian.
    let direct = Program::propose_labeled(tempered(1, 1.0).into(), tempered(1, 0.0).into(), 1)?;
    report("direct importance sampling", &direct, particles)?;

    // Two easier jumps through the beta = 0.5 waypoint. Each propose node
    // reports its own incremental weight to the session objective, which is
    // the hook the variational losses train through.
    let start: Program = tempered(0, 0.0).into();
    let mid = bridge_step(1, 0.5, start)?;
    let bridged = bridge_step(2, 1.0, mid)?;
    report("\nbridged (start -> beta 0.5 -> target)", &bridged, particles)?;

    // Resampling between the two jumps: cull low-weight particles midway.
    let start: Program = tempered(0, 0.0).into();
    let mid = Program::resample(bridge_step(1, 0.5, start)?, 0)?;
    let resampled = bridge_step(2, 1.0, mid)?;
    report("\nbridged with mid-path resampling", &resampled, particles)?;
    Ok(())
}
