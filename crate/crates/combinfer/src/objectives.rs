//! Variational objectives attached to proposal steps.
//!
//! Each objective implements [`LossFn`] and is called once per `propose` node
//! during a run; the session accumulates the returned terms into one scalar.
//! Because every step's incremental weight carries gradient paths for only its
//! own densities, a single accumulated loss trains all kernels of a nested
//! sampler jointly while keeping each level's estimator local.
//!
//! Gradient conventions:
//! - [`SviLoss`]: pathwise (reparameterized) negative evidence lower bound;
//!   run the session in [`SampleMode::Reparam`](crate::eval::SampleMode).
//! - [`RwsLoss`]: wake-phase score-function updates for both target and
//!   proposal parameters; run in `Detached` mode so density sums are the only
//!   gradient route.
//! - [`NviLoss`]: per-level forward- or reverse-KL surrogate over labeled
//!   proposal steps; forward KL is score-based (`Detached`), reverse KL is
//!   pathwise (`Reparam`).

use std::sync::Arc;

use crate::autodiff::Value;
use crate::error::{Error, Result};
use crate::eval::{LossArgs, LossFn};
use crate::tensor;

/// Normalized importance weights of a detached log-weight vector, broadcast
/// to `l` particles. Errors if every weight is zero.
fn normalized_weights(log_w: &Value, l: usize) -> Result<Vec<f64>> {
    let data = tensor::broadcast_to(log_w.data(), &[l])?;
    let logs = data.data();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights("all particle weights are zero".into()));
    }
    let unnorm: Vec<f64> = logs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.iter().map(|x| x / total).collect())
}

/// `sum_l w[l] * rho_sum[l]` with constant `w`, skipping zero-weight particles
/// so that off-support density sums (`-inf`) never poison the estimate.
fn weighted_score(w: &[f64], rho_sum: &Value) -> Result<Value> {
    if rho_sum.rank() == 0 {
        if w.len() != 1 {
            return Err(Error::ShapeMismatch { expected: vec![w.len()], got: vec![] });
        }
        return rho_sum.mul(&Value::scalar(w[0]));
    }
    let keep: Vec<usize> = (0..w.len()).filter(|&l| w[l] != 0.0).collect();
    if keep.is_empty() {
        return Ok(Value::scalar(0.0));
    }
    let weights = Value::vector(keep.iter().map(|&l| w[l]).collect());
    let selected = rho_sum.gather0(&Arc::new(keep));
    Ok(weights.mul(&selected)?.sum_all())
}

fn batch_len(args: &LossArgs) -> usize {
    if args.log_v.rank() == 0 {
        1
    } else {
        args.log_v.shape()[0]
    }
}

/// Reparameterized negative ELBO, attached to the outermost proposal step.
pub struct SviLoss;

impl LossFn for SviLoss {
    fn loss(&self, args: &LossArgs) -> Result<Value> {
        if args.depth != 0 {
            return Ok(Value::scalar(0.0));
        }
        // -mean(w_in + incremental): w_in arrives detached, so the gradient
        // is the pathwise gradient of this step's incremental weight.
        Ok(args.log_w_in.add(args.log_incr)?.mean_all().neg())
    }
}

/// Reweighted wake-sleep, wake-phase updates for target and proposal.
pub struct RwsLoss;

impl LossFn for RwsLoss {
    fn loss(&self, args: &LossArgs) -> Result<Value> {
        if args.depth != 0 {
            return Ok(Value::scalar(0.0));
        }
        let l = batch_len(args);
        let w_out = normalized_weights(args.log_v, l)?;
        let rho_p_base = args.rho_p_base.total()?;
        let rho_q = args.rho_q.total()?;
        // Target update: -sum(w_out * log p) over the non-extended density.
        // Extension-kernel densities integrate to one under the kernel, so
        // their posterior-weighted scores are zero-mean gradient noise;
        // kernels instead fit the incoming-weighted pairs below. Proposal
        // update: push the proposal toward the weighted posterior particles.
        let mut loss = weighted_score(&w_out, &rho_p_base)?
            .neg()
            .sub(&weighted_score(&w_out, &rho_q)?)?;
        let has_kernels = !args.rho_p_kernel.is_empty();
        // With non-trivial incoming weights the proposal term is corrected by
        // the incoming normalization; fresh chains (all-zero incoming logs)
        // use the plain wake update.
        let corrected = !args.log_w_in.data().data().iter().all(|&x| x == 0.0);
        if has_kernels || corrected {
            let w_in = normalized_weights(args.log_w_in, l)?;
            if has_kernels {
                // Incoming-weighted maximum likelihood: its optimum is the
                // exact conditional of the incoming state given the forward
                // move, i.e. the optimal reverse kernel for this step.
                loss = loss.sub(&weighted_score(&w_in, &args.rho_p_kernel.total()?)?)?;
            }
            if corrected {
                loss = loss.add(&weighted_score(&w_in, &rho_q)?)?;
            }
        }
        Ok(loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Divergence {
    /// Mass-covering: score-function surrogate of KL(target step || proposal step).
    ForwardKl,
    /// Mode-seeking: pathwise surrogate, the negative incremental bound.
    ReverseKl,
}

/// Per-step objective for nested (annealed) samplers. Fires at every labeled
/// proposal step; each step trains only its own kernels.
pub struct NviLoss {
    pub divergence: Divergence,
}

impl LossFn for NviLoss {
    fn loss(&self, args: &LossArgs) -> Result<Value> {
        match self.divergence {
            Divergence::ReverseKl => Ok(args.log_incr.mean_all().neg()),
            Divergence::ForwardKl => {
                let l = batch_len(args);
                let w_out = normalized_weights(args.log_v, l)?;
                let w_in = normalized_weights(args.log_w_in, l)?;
                let rho_q = args.rho_q.total()?;
                // Proposal side: (w_out - w_in)-weighted score; the w_in part
                // is the exact correction for the unknown incoming normalizer.
                let q_term =
                    weighted_score(&w_out, &rho_q)?.sub(&weighted_score(&w_in, &rho_q)?)?;
                // Target side, non-extended density: the unnormalized target
                // defines this step's normalizer, so the exact gradient is
                // the posterior covariance between the density's score and
                // the incremental weight — a score term whose coefficients
                // are the weights times the *centered* increments. A plain
                // posterior-weighted score would push unnormalized factors
                // up without bound.
                let incr = tensor::broadcast_to(args.log_incr.data(), &[l])?;
                let incr = incr.data();
                let mean: f64 =
                    (0..l).filter(|&i| w_out[i] != 0.0).map(|i| w_out[i] * incr[i]).sum();
                let centered: Vec<f64> = (0..l)
                    .map(|i| if w_out[i] == 0.0 { 0.0 } else { w_out[i] * (incr[i] - mean) })
                    .collect();
                let base_term = weighted_score(&centered, &args.rho_p_base.total()?)?;
                // The extension kernels' densities integrate to one, so
                // posterior-weighted scores on them are zero-mean noise that
                // destabilizes training. Kernels fit the incoming-weighted
                // pairs instead — the maximizer is the exact conditional of
                // the incoming state given this step's forward move, which is
                // also the optimal reverse kernel of the forward divergence.
                let mut loss = q_term.neg().add(&base_term)?;
                if !args.rho_p_kernel.is_empty() {
                    loss =
                        loss.sub(&weighted_score(&w_in, &args.rho_p_kernel.total()?)?)?;
                }
                Ok(loss)
            }
        }
    }
}

/// log of the average unnormalized weight: the evidence estimate.
pub fn log_z_hat(log_w: &Value) -> f64 {
    let logs = log_w.data();
    let n = logs.len() as f64;
    let max = logs.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = logs.data().iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln() - n.ln()
}

/// Effective sample size `(sum w)^2 / sum w^2` of a log-weight vector.
pub fn ess(log_w: &Value) -> f64 {
    let logs = log_w.data();
    let max = logs.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return 0.0;
    }
    let s1: f64 = logs.data().iter().map(|&x| (x - max).exp()).sum();
    let s2: f64 = logs.data().iter().map(|&x| (2.0 * (x - max)).exp()).sum();
    s1 * s1 / s2
}

/// ESS as a fraction of the particle count.
pub fn ess_fraction(log_w: &Value) -> f64 {
    ess(log_w) / log_w.len() as f64
}
