//! Traced evaluation of primitive probabilistic programs.
//!
//! A primitive program is a closure over an [`EvalScope`], which exposes three
//! effects: `sample` (latent draw, recorded in the trace), `observe` (clamp a
//! site to data, density only), and `factor` (add an unnormalized log weight).
//! Evaluation produces a [`WeightedEvaluation`]: outputs, the trace of latent
//! values, the density map over *all* scored sites, and an importance weight.
//!
//! Weights follow the substitution rule: freshly drawn latents contribute
//! nothing (they are drawn from their own density), while observed sites,
//! factors, and latents *reused* from a substitution trace contribute their
//! log densities. With no substitution this reduces to likelihood weighting.
//!
//! Gradients: in [`SampleMode::Reparam`], reparameterizable sites are drawn
//! with pathwise gradients to their parameters; non-reparameterizable sites
//! fall back to detached draws. In [`SampleMode::Detached`] every draw is a
//! constant, so gradients flow only through density evaluations (the score
//! route used by wake-sleep-style objectives).

use std::sync::Arc;

use crate::autodiff::{Tape, Value};
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::trace::{Address, DensityMap, LogWeight, Trace, WeightedEvaluation};

/// How latent draws interact with the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Pathwise gradients where the family supports them.
    Reparam,
    /// All draws are constants; only densities carry gradients.
    Detached,
}

/// Arguments handed to the training objective at every proposal step.
pub struct LossArgs<'a> {
    /// Densities accumulated by the proposal program.
    pub rho_q: &'a DensityMap,
    /// Densities accumulated by the target program (under substitution).
    pub rho_p: &'a DensityMap,
    /// The target densities minus extension-kernel sites: the non-extended
    /// density, whose score is the low-variance choice for weighted updates.
    pub rho_p_base: &'a DensityMap,
    /// The extension kernels' own densities. These integrate to one under the
    /// kernels, so outgoing-weighted score terms on them are zero-mean noise;
    /// kernels train against the incoming-weighted pairs instead.
    pub rho_p_kernel: &'a DensityMap,
    /// Detached incoming log weight of the proposal's result.
    pub log_w_in: &'a Value,
    /// Incremental log weight of this step alone (differentiable; gradient
    /// paths touch only this step's densities).
    pub log_incr: &'a Value,
    /// Full outgoing log weight, `log_w_in + log_incr` as a value.
    pub log_v: &'a Value,
    /// Step label set by the program builder (e.g. an annealing level).
    pub label: Option<u32>,
    /// Nesting depth of the proposal node; 0 is the outermost.
    pub depth: usize,
}

/// A per-step loss contribution, accumulated on the session.
pub trait LossFn: Send + Sync {
    fn loss(&self, args: &LossArgs) -> Result<Value>;
}

/// Shared evaluation state: randomness, batching, tape, and training hooks.
pub struct Session {
    pub rng: RandomStream,
    pub sample_shape: Vec<usize>,
    pub tape: Option<Tape>,
    pub mode: SampleMode,
    pub objective: Option<Arc<dyn LossFn>>,
    loss: Value,
    pub(crate) propose_depth: usize,
}

impl Session {
    pub fn new(rng: RandomStream) -> Self {
        Session {
            rng,
            sample_shape: vec![],
            tape: None,
            mode: SampleMode::Detached,
            objective: None,
            loss: Value::scalar(0.0),
            propose_depth: 0,
        }
    }

    pub fn with_sample_shape(mut self, shape: Vec<usize>) -> Self {
        self.sample_shape = shape;
        self
    }

    pub fn with_tape(mut self, tape: Tape) -> Self {
        self.tape = Some(tape);
        self
    }

    pub fn with_mode(mut self, mode: SampleMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_objective(mut self, objective: Arc<dyn LossFn>) -> Self {
        self.objective = Some(objective);
        self
    }

    /// Accumulated objective value for the current run.
    pub fn loss(&self) -> &Value {
        &self.loss
    }

    pub fn reset_loss(&mut self) {
        self.loss = Value::scalar(0.0);
    }

    pub(crate) fn add_loss(&mut self, term: Value) -> Result<()> {
        self.loss = self.loss.add(&term)?;
        Ok(())
    }
}

/// A named, fixed-arity probabilistic program.
#[derive(Clone)]
pub struct PrimitiveProgram {
    name: String,
    arity: usize,
    body: Arc<dyn Fn(&mut EvalScope, &[Value]) -> Result<Vec<Value>> + Send + Sync>,
}

impl std::fmt::Debug for PrimitiveProgram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PrimitiveProgram({}/{})", self.name, self.arity)
    }
}

impl PrimitiveProgram {
    pub fn new(
        name: impl Into<String>,
        arity: usize,
        body: impl Fn(&mut EvalScope, &[Value]) -> Result<Vec<Value>> + Send + Sync + 'static,
    ) -> Self {
        PrimitiveProgram { name: name.into(), arity, body: Arc::new(body) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }
}

/// The effect handler a program body runs against.
pub struct EvalScope<'a> {
    session: &'a mut Session,
    substitution: Option<&'a Trace>,
    strict: bool,
    trace: Trace,
    densities: DensityMap,
    log_weight: LogWeight,
    factor_count: usize,
}

impl<'a> EvalScope<'a> {
    pub fn sample_shape(&self) -> &[usize] {
        &self.session.sample_shape
    }

    pub fn tape(&self) -> Option<Tape> {
        self.session.tape.clone()
    }

    pub fn mode(&self) -> SampleMode {
        self.session.mode
    }

    /// Latent draw at `address`, reusing the substitution's value when present.
    pub fn sample(&mut self, address: impl Into<Address>, dist: Distribution) -> Result<Value> {
        let address = address.into();
        if self.densities.contains(&address) {
            return Err(Error::DuplicateAddress(address.to_string()));
        }
        let (value, reused) = match self.substitution.and_then(|t| t.get(&address)) {
            Some(v) => (v.clone(), true),
            None if self.strict => {
                return Err(Error::IncompleteTrace(address.to_string()));
            }
            None => {
                let v = match self.session.mode {
                    SampleMode::Reparam if dist.reparameterizable() => {
                        dist.rsample(&mut self.session.rng, &self.session.sample_shape.clone())?
                    }
                    _ => dist.sample(&mut self.session.rng, &self.session.sample_shape.clone())?,
                };
                (v, false)
            }
        };
        let lp = dist.log_prob(&value)?;
        self.trace.insert(address.clone(), value.clone())?;
        self.densities.insert(address, lp.clone())?;
        if reused {
            // Reused latents are scored like observations: their density is
            // part of the weight because nothing was drawn for them here.
            self.log_weight = self.log_weight.times(&lp)?;
        }
        Ok(value)
    }

    /// Clamp `address` to `value` and score it. Never consults the substitution.
    pub fn observe(&mut self, address: impl Into<Address>, dist: Distribution, value: Value) -> Result<Value> {
        let address = address.into();
        if self.densities.contains(&address) {
            return Err(Error::DuplicateAddress(address.to_string()));
        }
        let lp = dist.log_prob(&value)?;
        self.densities.insert(address, lp.clone())?;
        self.log_weight = self.log_weight.times(&lp)?;
        Ok(value)
    }

    /// Add an explicit log factor at an auto-numbered `factor/<n>` address.
    pub fn factor(&mut self, log_weight: Value) -> Result<()> {
        let address = Address::new(format!("factor/{}", self.factor_count));
        self.factor_count += 1;
        self.factor_at(address, log_weight)
    }

    /// Add an explicit log factor at a caller-chosen address.
    pub fn factor_at(&mut self, address: impl Into<Address>, log_weight: Value) -> Result<()> {
        let address = address.into();
        if self.densities.contains(&address) {
            return Err(Error::DuplicateAddress(address.to_string()));
        }
        self.densities.insert(address, log_weight.clone())?;
        self.log_weight = self.log_weight.times(&log_weight)?;
        Ok(())
    }
}

/// Run `f` on `inputs` under an optional substitution trace.
///
/// With `strict` set, every latent site must be covered by the substitution
/// (deterministic replay); a missing site is an [`Error::IncompleteTrace`].
pub fn evaluate(
    f: &PrimitiveProgram,
    inputs: &[Value],
    session: &mut Session,
    substitution: Option<&Trace>,
    strict: bool,
) -> Result<WeightedEvaluation> {
    if inputs.len() != f.arity {
        return Err(Error::ArityMismatch(format!(
            "{} expects {} inputs, got {}",
            f.name,
            f.arity,
            inputs.len()
        )));
    }
    let mut scope = EvalScope {
        session,
        substitution,
        strict,
        trace: Trace::new(),
        densities: DensityMap::new(),
        log_weight: LogWeight::zero(),
        factor_count: 0,
    };
    let outputs = (f.body.clone())(&mut scope, inputs)?;
    Ok(WeightedEvaluation {
        outputs,
        trace: scope.trace,
        densities: scope.densities,
        log_weight: scope.log_weight,
    })
}

/// Sum of all scored densities: the unnormalized log joint.
pub fn log_joint(densities: &DensityMap) -> Result<Value> {
    densities.total()
}

/// Sum of densities at traced (latent) addresses only.
pub fn log_prior(densities: &DensityMap, trace: &Trace) -> Result<Value> {
    densities.total_over(trace.addresses())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, Parameter, Tape};
    use crate::dist;
    use crate::tensor::TensorData;
    use crate::trace::weight_conditioned;

    // Normal whose mean is a Value (possibly tape-backed).
    fn normal_at(mean: &Value, std: f64) -> Result<Distribution> {
        Distribution::normal(mean.clone(), Value::scalar(std))
    }

    fn gaussian_pair() -> PrimitiveProgram {
        PrimitiveProgram::new("pair", 0, |scope, _| {
            let x = scope.sample("x", dist::normal(0.0, 1.0))?;
            scope.observe("y", normal_at(&x, 1.0)?, Value::scalar(0.5))?;
            Ok(vec![x])
        })
    }

    #[test]
    fn unconditioned_weight_is_likelihood_only() {
        let mut session = Session::new(RandomStream::seeded(0, 0));
        let out = evaluate(&gaussian_pair(), &[], &mut session, None, false).unwrap();
        let x = out.trace.get(&"x".into()).unwrap().item();
        let expected = -0.5 * (0.5 - x) * (0.5 - x) - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((out.log_weight.value().item() - expected).abs() < 1e-12);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.densities.len(), 2);
    }

    #[test]
    fn substitution_reuse_scores_like_an_observation() {
        let mut session = Session::new(RandomStream::seeded(0, 0));
        let mut sub = Trace::new();
        sub.insert("x".into(), Value::scalar(0.3)).unwrap();
        let out = evaluate(&gaussian_pair(), &[], &mut session, Some(&sub), false).unwrap();
        assert_eq!(out.trace.get(&"x".into()).unwrap().item(), 0.3);
        let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let expected = (-0.5 * 0.3 * 0.3 - c) + (-0.5 * 0.2 * 0.2 - c);
        assert!((out.log_weight.value().item() - expected).abs() < 1e-12);
        // The incremental weight matches the closed-form conditioned weight.
        let recomputed = weight_conditioned(&out.densities, &out.trace, &sub).unwrap();
        assert_eq!(recomputed.value().item(), out.log_weight.value().item());
    }

    #[test]
    fn strict_mode_requires_full_coverage() {
        let mut session = Session::new(RandomStream::seeded(0, 0));
        let err = evaluate(&gaussian_pair(), &[], &mut session, Some(&Trace::new()), true);
        assert!(matches!(err, Err(Error::IncompleteTrace(_))));

        let mut sub = Trace::new();
        sub.insert("x".into(), Value::scalar(-1.25)).unwrap();
        // Deterministic: two different seeds give identical results.
        let mut s1 = Session::new(RandomStream::seeded(1, 0));
        let mut s2 = Session::new(RandomStream::seeded(99, 7));
        let a = evaluate(&gaussian_pair(), &[], &mut s1, Some(&sub), true).unwrap();
        let b = evaluate(&gaussian_pair(), &[], &mut s2, Some(&sub), true).unwrap();
        assert_eq!(a.log_weight.value().item(), b.log_weight.value().item());
        assert_eq!(a.outputs[0].item(), b.outputs[0].item());
    }

    #[test]
    fn factors_enter_weight_and_densities() {
        let f = PrimitiveProgram::new("factored", 0, |scope, _| {
            let x = scope.sample("x", dist::bernoulli(0.5))?;
            scope.factor(Value::scalar(std::f64::consts::LN_2))?;
            Ok(vec![x])
        });
        let mut session = Session::new(RandomStream::seeded(0, 0));
        let out = evaluate(&f, &[], &mut session, None, false).unwrap();
        assert!(out.densities.contains(&"factor/0".into()));
        assert!((out.log_weight.value().item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn duplicate_addresses_are_rejected() {
        let f = PrimitiveProgram::new("dup", 0, |scope, _| {
            scope.sample("x", dist::bernoulli(0.5))?;
            scope.sample("x", dist::bernoulli(0.5))?;
            Ok(vec![])
        });
        let mut session = Session::new(RandomStream::seeded(0, 0));
        assert!(matches!(
            evaluate(&f, &[], &mut session, None, false),
            Err(Error::DuplicateAddress(_))
        ));
    }

    #[test]
    fn arity_is_checked() {
        let f = PrimitiveProgram::new("id", 1, |_, inputs| Ok(vec![inputs[0].clone()]));
        let mut session = Session::new(RandomStream::seeded(0, 0));
        assert!(matches!(
            evaluate(&f, &[], &mut session, None, false),
            Err(Error::ArityMismatch(_))
        ));
    }

    #[test]
    fn batched_evaluation_is_per_sample() {
        let mut session = Session::new(RandomStream::seeded(0, 0)).with_sample_shape(vec![4]);
        let out = evaluate(&gaussian_pair(), &[], &mut session, None, false).unwrap();
        assert_eq!(out.trace.get(&"x".into()).unwrap().shape(), &[4]);
        assert_eq!(out.log_weight.value().shape(), &[4]);
    }

    #[test]
    fn reparam_draws_carry_gradients_and_detached_draws_do_not() {
        let mu = Parameter::new("mu", TensorData::scalar(0.0));
        let build = |mu: &Parameter, tape: &Tape| {
            let muv = mu.to_value(Some(tape));
            PrimitiveProgram::new("latent", 0, move |scope, _| {
                let d = Distribution::normal(muv.clone(), Value::scalar(1.0))?;
                let x = scope.sample("x", d)?;
                Ok(vec![x])
            })
        };

        let tape = Tape::new();
        let f = build(&mu, &tape);
        let mut session = Session::new(RandomStream::seeded(3, 0))
            .with_tape(tape)
            .with_mode(SampleMode::Reparam);
        let out = evaluate(&f, &[], &mut session, None, false).unwrap();
        backward(&out.outputs[0]).unwrap();
        assert!((mu.grad()[0] - 1.0).abs() < 1e-12);
        mu.zero_grad();

        let tape = Tape::new();
        let f = build(&mu, &tape);
        let mut session = Session::new(RandomStream::seeded(3, 0))
            .with_tape(tape)
            .with_mode(SampleMode::Detached);
        let out = evaluate(&f, &[], &mut session, None, false).unwrap();
        assert!(!out.outputs[0].is_on_tape());
        // The density still reaches mu through the score route.
        backward(&out.densities.get(&"x".into()).unwrap().clone()).unwrap();
        let x = out.outputs[0].item();
        assert!((mu.grad()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn log_joint_and_log_prior_split_the_density_map() {
        let mut session = Session::new(RandomStream::seeded(0, 0));
        let out = evaluate(&gaussian_pair(), &[], &mut session, None, false).unwrap();
        let joint = log_joint(&out.densities).unwrap().item();
        let prior = log_prior(&out.densities, &out.trace).unwrap().item();
        let lik = out.log_weight.value().item();
        assert!((joint - (prior + lik)).abs() < 1e-12);
    }
}
