//! Inference combinators over traced programs.
//!
//! The grammar separates *target-class* programs (things a sampler can
//! target) from general samplers:
//!
//! ```text
//! p ::= f | extend(p, f)                      target class
//! q ::= p | resample(q) | compose(q2, q1) | propose(p, q)
//! ```
//!
//! Every combinator maps weighted evaluations to weighted evaluations and
//! preserves proper weighting for its target, so samplers compose: the output
//! of one stage is a valid input for the next. `propose` is also the training
//! hook — each proposal step hands its densities and weights to the session's
//! objective, which is how one variational loss trains every kernel of a
//! nested sampler in a single pass.

use std::sync::Arc;

use crate::autodiff::Value;
use crate::error::{Error, Result};
use crate::eval::{evaluate, LossArgs, PrimitiveProgram, Session};
use crate::trace::{log_mean_exp, weight_conditioned, DensityMap, WeightedEvaluation};

/// A program in the target class: a primitive, possibly extended by kernels.
#[derive(Clone, Debug)]
pub enum Target {
    Primitive(PrimitiveProgram),
    Extend { p: Box<Target>, kernel: PrimitiveProgram },
}

/// A sampler built from the four combinators.
#[derive(Clone, Debug)]
pub enum Program {
    Target(Target),
    /// `compose(outer, inner)`: run `inner`, feed its outputs to `outer`.
    Compose { outer: Box<Program>, inner: Box<Program> },
    /// Systematic resampling of a batched sampler along `dim`.
    Resample { inner: Box<Program>, dim: usize },
    /// Importance (re)weighting of `proposal` toward `target`.
    Propose { target: Target, proposal: Box<Program>, label: Option<u32> },
}

impl From<PrimitiveProgram> for Target {
    fn from(f: PrimitiveProgram) -> Self {
        Target::Primitive(f)
    }
}

impl From<PrimitiveProgram> for Program {
    fn from(f: PrimitiveProgram) -> Self {
        Program::Target(Target::Primitive(f))
    }
}

impl From<Target> for Program {
    fn from(t: Target) -> Self {
        Program::Target(t)
    }
}

impl Target {
    pub fn extend(p: Target, kernel: PrimitiveProgram) -> Target {
        Target::Extend { p: Box::new(p), kernel }
    }

    /// The primitive the target denotes once extensions are marginalized out.
    pub fn marginal(&self) -> &PrimitiveProgram {
        match self {
            Target::Primitive(f) => f,
            Target::Extend { p, .. } => p.marginal(),
        }
    }

    pub fn render(&self) -> String {
        match self {
            Target::Primitive(f) => f.name().to_string(),
            Target::Extend { p, kernel } => format!("(extend {} {})", p.render(), kernel.name()),
        }
    }

    /// Runs the target, additionally reporting which of the accumulated
    /// densities came from extension kernels (the auxiliary coordinates) so
    /// objectives can treat the non-extended density separately.
    fn run_target(
        &self,
        inputs: &[Value],
        session: &mut Session,
        substitution: Option<&crate::trace::Trace>,
        strict: bool,
    ) -> Result<(WeightedEvaluation, DensityMap)> {
        match self {
            Target::Primitive(f) => {
                Ok((evaluate(f, inputs, session, substitution, strict)?, DensityMap::new()))
            }
            Target::Extend { p, kernel } => {
                let (base, base_kernels) = p.run_target(inputs, session, substitution, strict)?;
                let ext = evaluate(kernel, &base.outputs, session, substitution, strict)?;
                // A kernel may only sample: every density it scores must be a
                // site it traced, otherwise the extended density would not
                // normalize to the base target's marginal.
                for addr in ext.densities.addresses() {
                    if !ext.trace.contains(addr) {
                        return Err(Error::KernelHasObserve(format!(
                            "kernel {} scored {} without sampling it",
                            kernel.name(),
                            addr
                        )));
                    }
                }
                let merged = WeightedEvaluation {
                    // Extension kernels augment the space; the output stays
                    // the base program's so downstream consumers see the
                    // target's value, not the auxiliary one.
                    outputs: base.outputs,
                    trace: base.trace.merge(&ext.trace)?,
                    densities: base.densities.merge(&ext.densities)?,
                    log_weight: base.log_weight.times(ext.log_weight.value())?,
                };
                Ok((merged, base_kernels.merge(&ext.densities)?))
            }
        }
    }
}

impl Program {
    /// `propose(target, proposal)`; fails unless `target` is target-class.
    pub fn propose(target: Program, proposal: Program) -> Result<Program> {
        Ok(Program::Propose {
            target: target.try_into_target()?,
            proposal: Box::new(proposal),
            label: None,
        })
    }

    /// `propose` carrying a step label for per-level objectives.
    pub fn propose_labeled(target: Program, proposal: Program, label: u32) -> Result<Program> {
        Ok(Program::Propose {
            target: target.try_into_target()?,
            proposal: Box::new(proposal),
            label: Some(label),
        })
    }

    /// `extend(p, kernel)`; fails unless `p` is target-class.
    pub fn extend(p: Program, kernel: PrimitiveProgram) -> Result<Program> {
        Ok(Program::Target(Target::Extend { p: Box::new(p.try_into_target()?), kernel }))
    }

    pub fn compose(outer: Program, inner: Program) -> Program {
        Program::Compose { outer: Box::new(outer), inner: Box::new(inner) }
    }

    /// Systematic resampling along `dim`. Only `dim == 0` over rank-1 weights
    /// is supported; higher dims are rejected eagerly.
    pub fn resample(inner: Program, dim: usize) -> Result<Program> {
        if dim != 0 {
            return Err(Error::InvalidConfig(format!(
                "resample supports dim 0 over rank-1 weights, got dim {dim}"
            )));
        }
        Ok(Program::Resample { inner: Box::new(inner), dim })
    }

    /// Recover the target-class program, or report why this isn't one.
    pub fn try_into_target(self) -> Result<Target> {
        match self {
            Program::Target(t) => Ok(t),
            other => Err(Error::NotTargetClass(other.render())),
        }
    }

    /// The target-class program this sampler is properly weighted for.
    pub fn target_program(&self) -> Result<Target> {
        match self {
            Program::Target(t) => Ok(t.clone()),
            Program::Propose { target, .. } => Ok(target.clone()),
            Program::Resample { inner, .. } => inner.target_program(),
            Program::Compose { outer, inner } => {
                // Composing a kernel after a sampler targets the extension of
                // the inner target by that kernel.
                let kernel = match outer.as_ref() {
                    Program::Target(Target::Primitive(f)) => f.clone(),
                    other => return Err(Error::NotTargetClass(other.render())),
                };
                Ok(Target::Extend { p: Box::new(inner.target_program()?), kernel })
            }
        }
    }

    /// The primitive whose unnormalized density the sampler's weights
    /// estimate, with all auxiliary kernels marginalized out.
    pub fn marginal_program(&self) -> Result<PrimitiveProgram> {
        Ok(self.target_program()?.marginal().clone())
    }

    pub fn render(&self) -> String {
        match self {
            Program::Target(t) => t.render(),
            Program::Compose { outer, inner } => {
                format!("(compose {} {})", outer.render(), inner.render())
            }
            Program::Resample { inner, dim } => format!("(resample {} {})", inner.render(), dim),
            Program::Propose { target, proposal, .. } => {
                format!("(propose {} {})", target.render(), proposal.render())
            }
        }
    }

    /// Tally the combinator nodes in this sampler, for structural checks.
    pub fn node_counts(&self) -> NodeCounts {
        fn target(t: &Target, c: &mut NodeCounts) {
            match t {
                Target::Primitive(_) => c.primitives += 1,
                Target::Extend { p, .. } => {
                    c.extends += 1;
                    c.primitives += 1; // the kernel
                    target(p, c);
                }
            }
        }
        fn walk(p: &Program, c: &mut NodeCounts) {
            match p {
                Program::Target(t) => target(t, c),
                Program::Compose { outer, inner } => {
                    c.composes += 1;
                    walk(outer, c);
                    walk(inner, c);
                }
                Program::Resample { inner, .. } => {
                    c.resamples += 1;
                    walk(inner, c);
                }
                Program::Propose { target: t, proposal, .. } => {
                    c.proposes += 1;
                    target(t, c);
                    walk(proposal, c);
                }
            }
        }
        let mut counts = NodeCounts::default();
        walk(self, &mut counts);
        counts
    }

    /// Run the sampler, producing a properly weighted evaluation.
    pub fn run(&self, inputs: &[Value], session: &mut Session) -> Result<WeightedEvaluation> {
        match self {
            Program::Target(t) => Ok(t.run_target(inputs, session, None, false)?.0),

            Program::Compose { outer, inner } => {
                let first = inner.run(inputs, session)?;
                let second = outer.run(&first.outputs, session)?;
                Ok(WeightedEvaluation {
                    outputs: second.outputs,
                    trace: first.trace.merge(&second.trace)?,
                    densities: first.densities.merge(&second.densities)?,
                    log_weight: first.log_weight.times(second.log_weight.value())?,
                })
            }

            Program::Resample { inner, dim } => {
                let incoming = inner.run(inputs, session)?;
                resample_systematic(incoming, *dim, session)
            }

            Program::Propose { target, proposal, label } => {
                let depth = session.propose_depth;
                session.propose_depth += 1;
                let prop = proposal.run(inputs, session)?;
                // Score the proposal's latents under the target, extending
                // the trace where the target has sites the proposal lacks.
                let (tgt, kernel_densities) =
                    target.run_target(inputs, session, Some(&prop.trace), false)?;
                // Replay the marginal target deterministically to drop
                // auxiliary kernel sites from the outgoing evaluation. The
                // replay substitutes *detached* values: each proposal step is
                // a gradient boundary, so downstream losses cannot reach back
                // into this step's parameters through the passed-on state.
                let boundary = tgt.trace.detached();
                let replay = evaluate(target.marginal(), inputs, session, Some(&boundary), true)?;
                session.propose_depth = depth;

                // u1: the proposal's density over everything except sites the
                // target did not consume (those remain marginalized).
                let u1 = weight_conditioned(&prop.densities, &prop.trace, &tgt.trace)?;
                // Incremental weight of this step; its gradient paths touch
                // only this step's densities.
                let log_incr = tgt.log_weight.value().sub_log_guard(u1.value())?;
                let log_v = prop.log_weight.value().add(&log_incr)?;

                if let Some(objective) = session.objective.clone() {
                    let log_w_in = prop.log_weight.value().detach();
                    let rho_p_base =
                        tgt.densities.filtered(|a| !kernel_densities.contains(a));
                    let term = objective.loss(&LossArgs {
                        rho_q: &prop.densities,
                        rho_p: &tgt.densities,
                        rho_p_base: &rho_p_base,
                        rho_p_kernel: &kernel_densities,
                        log_w_in: &log_w_in,
                        log_incr: &log_incr,
                        log_v: &log_v,
                        label: *label,
                        depth,
                    })?;
                    session.add_loss(term)?;
                }

                Ok(WeightedEvaluation {
                    outputs: replay.outputs,
                    trace: replay.trace,
                    densities: replay.densities,
                    log_weight: crate::trace::LogWeight::new(log_v),
                })
            }
        }
    }
}

/// Per-kind node totals of a combinator expression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NodeCounts {
    pub primitives: usize,
    pub extends: usize,
    pub composes: usize,
    pub resamples: usize,
    pub proposes: usize,
}

/// Systematic resampling: one uniform, `L` evenly spaced points, ancestors by
/// scanning the cumulative normalized weights. Returns the reindexed
/// evaluation with every outgoing weight set to the mean incoming weight.
fn resample_systematic(
    incoming: WeightedEvaluation,
    dim: usize,
    session: &mut Session,
) -> Result<WeightedEvaluation> {
    debug_assert_eq!(dim, 0);
    let w = incoming.log_weight.value();
    if w.rank() != 1 {
        return Err(Error::InvalidConfig(format!(
            "resample needs rank-1 weights along dim 0, got shape {:?}",
            w.shape()
        )));
    }
    let l = w.shape()[0];
    let logs = w.data().data();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllZeroWeights);
    }
    let unnorm: Vec<f64> = logs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let mut cumulative = Vec::with_capacity(l);
    let mut acc = 0.0;
    for &x in &unnorm {
        acc += x;
        cumulative.push(acc / total);
    }

    // Points where the ancestor assignment changes as the uniform sweeps
    // [0, 1): the fractional parts of L * C_i. These make the draw exactly
    // enumerable: within a segment the assignment is constant.
    let mut breakpoints: Vec<f64> = cumulative
        .iter()
        .map(|&c| {
            let x = l as f64 * c;
            x - x.floor()
        })
        .filter(|&b| b > 0.0 && b < 1.0)
        .collect();
    breakpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breakpoints.dedup();

    let u = session.rng.uniform_segmented(&breakpoints)?;

    let mut ancestors = Vec::with_capacity(l);
    let mut i = 0;
    for slot in 0..l {
        let point = (slot as f64 + u) / l as f64;
        while i + 1 < l && cumulative[i] <= point {
            i += 1;
        }
        ancestors.push(i);
    }
    let idx = Arc::new(ancestors);

    let outputs = incoming.outputs.iter().map(|o| gather_checked(o, &idx, l)).collect::<Result<_>>()?;
    let trace = incoming.trace.gather0(&idx);
    let densities = incoming.densities.gather0(&idx);
    // Outgoing weights: the average incoming weight, shared by every particle.
    let mean = log_mean_exp(w, 0);
    let log_weight = crate::trace::LogWeight::new(mean.broadcast_to(&[l])?);
    Ok(WeightedEvaluation { outputs, trace, densities, log_weight })
}

fn gather_checked(v: &Value, idx: &Arc<Vec<usize>>, l: usize) -> Result<Value> {
    if v.rank() == 0 || v.shape()[0] != l {
        return Err(Error::ShapeMismatch { expected: vec![l], got: v.shape().to_vec() });
    }
    Ok(v.gather0(idx))
}

/// Offspring counts implied by an ancestor vector.
pub fn offspring_counts(ancestors: &[usize], l: usize) -> Vec<usize> {
    let mut counts = vec![0; l];
    for &a in ancestors {
        counts[a] += 1;
    }
    counts
}
