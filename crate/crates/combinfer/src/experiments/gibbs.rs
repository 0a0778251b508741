//! Population Gibbs on a conjugate mixture toy.
//!
//! The model draws a 5-way component `z`, a latent `v ~ N(mean_z, sigma_v^2)`,
//! and observes `x ~ N(slope * v + intercept, sigma_x^2)`. Both block
//! conditionals are available in closed form (`z | v` by enumeration, `v | z,
//! x` by conjugacy), so a sweep built from `propose`/`extend`/`compose`/
//! `resample` with those kernels must leave the incremental weight of every
//! block update at exactly zero: the target ratio cancels against the
//! kernel ratio term by term. That cancellation — and the node counts of the
//! assembled program — are the checks this module backs.
//!
//! Addresses carry per-block version suffixes (`z/3`, `v/2`): each update
//! writes a fresh version of its own block only, so traces stay append-only
//! and the reverse kernel can score the previous version explicitly.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::combinators::{NodeCounts, Program};
use crate::dist::Distribution;
use crate::error::Result;
use crate::eval::{LossArgs, LossFn, PrimitiveProgram, SampleMode, Session};
use crate::objectives::log_z_hat;
use crate::rng::RandomStream;

const COMPONENTS: usize = 5;

/// The toy model's fixed constants and its observation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GibbsModel {
    pub means: [f64; COMPONENTS],
    pub sigma_v: f64,
    pub slope: f64,
    pub intercept: f64,
    pub sigma_x: f64,
    pub observed: f64,
}

impl Default for GibbsModel {
    fn default() -> Self {
        GibbsModel {
            means: [-4.0, -2.0, 0.0, 2.0, 4.0],
            sigma_v: 1.0,
            slope: 0.5,
            intercept: 1.0,
            sigma_x: 0.7,
            observed: 1.3,
        }
    }
}

impl GibbsModel {
    /// Posterior precision of `v` given `z` (component-independent).
    fn v_precision(&self) -> f64 {
        1.0 / (self.sigma_v * self.sigma_v) + (self.slope * self.slope) / (self.sigma_x * self.sigma_x)
    }

    /// Posterior mean of `v` for prior mean `mu`.
    fn v_posterior_mean(&self, mu: f64) -> f64 {
        let tau = self.v_precision();
        (mu / (self.sigma_v * self.sigma_v)
            + self.slope * (self.observed - self.intercept) / (self.sigma_x * self.sigma_x))
            / tau
    }

    /// Exact log marginal likelihood: each component contributes a Gaussian
    /// in `x` with the latent `v` integrated out.
    pub fn exact_log_marginal(&self) -> f64 {
        let var = self.slope * self.slope * self.sigma_v * self.sigma_v + self.sigma_x * self.sigma_x;
        let terms: Vec<f64> = self
            .means
            .iter()
            .map(|&mu| {
                let m = self.slope * mu + self.intercept;
                (1.0 / COMPONENTS as f64).ln() + log_normal(self.observed, m, var.sqrt())
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Exact posterior mean of `v`.
    pub fn exact_posterior_mean_v(&self) -> f64 {
        let var = self.slope * self.slope * self.sigma_v * self.sigma_v + self.sigma_x * self.sigma_x;
        let logs: Vec<f64> = self
            .means
            .iter()
            .map(|&mu| log_normal(self.observed, self.slope * mu + self.intercept, var.sqrt()))
            .collect();
        let norm = log_sum_exp(&logs);
        self.means
            .iter()
            .zip(&logs)
            .map(|(&mu, &l)| (l - norm).exp() * self.v_posterior_mean(mu))
            .sum()
    }
}

fn log_normal(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn uniform_components() -> Vec<f64> {
    vec![1.0 / COMPONENTS as f64; COMPONENTS]
}

/// The joint model at version `(zi, vj)`: addresses `z/{zi}`, `v/{vj}`, and
/// the observation at `x`. Outputs `[z one-hot, v]`.
fn target_at(model: GibbsModel, zi: u64, vj: u64) -> PrimitiveProgram {
    PrimitiveProgram::new(&format!("mix[{zi},{vj}]"), 0, move |scope, _inputs| {
        let z = scope.sample(
            format!("z/{zi}"),
            Distribution::one_hot_categorical(Value::vector(uniform_components()))?,
        )?;
        let mu = z.mul(&Value::vector(model.means.to_vec()))?.sum_axis(z.rank() - 1);
        let v = scope.sample(
            format!("v/{vj}"),
            Distribution::normal(mu, Value::scalar(model.sigma_v))?,
        )?;
        let lik_mean = v.mul(&Value::scalar(model.slope))?.add(&Value::scalar(model.intercept))?;
        scope.observe(
            "x",
            Distribution::normal(lik_mean, Value::scalar(model.sigma_x))?,
            Value::scalar(model.observed),
        )?;
        Ok(vec![z, v])
    })
}

/// The sweep-0 proposal: component from its prior, `v` from a wide Gaussian.
fn initial_proposal(model: GibbsModel) -> PrimitiveProgram {
    let _ = model;
    PrimitiveProgram::new("init", 0, move |scope, _inputs| {
        let z = scope.sample(
            "z/0",
            Distribution::one_hot_categorical(Value::vector(uniform_components()))?,
        )?;
        let v = scope.sample("v/0", crate::dist::normal(0.0, 3.0))?;
        Ok(vec![z, v])
    })
}

/// Exact conditional of `z` given `v`: rows proportional to
/// `prior_c * N(v; mean_c, sigma_v^2)`. The observation drops out because `x`
/// depends on `z` only through `v`.
fn z_conditional(model: &GibbsModel, v: &Value) -> Result<Distribution> {
    let data = v.data();
    let mut rows = Vec::with_capacity(data.len() * COMPONENTS);
    for &vi in data.data() {
        let logs: Vec<f64> = model
            .means
            .iter()
            .map(|&mu| log_normal(vi, mu, model.sigma_v))
            .collect();
        let norm = log_sum_exp(&logs);
        rows.extend(logs.iter().map(|&l| (l - norm).exp()));
    }
    let mut shape = data.shape().to_vec();
    shape.push(COMPONENTS);
    Distribution::one_hot_categorical(Value::from_shape_vec(shape, rows))
}

/// Exact conditional of `v` given `z` and the observation, by conjugacy.
fn v_conditional(model: &GibbsModel, z: &Value) -> Result<Distribution> {
    let mu = z.detach().mul(&Value::vector(model.means.to_vec()))?.sum_axis(z.rank() - 1);
    let tau = model.v_precision();
    let scale = 1.0 / (model.sigma_v * model.sigma_v * tau);
    let shift = model.slope * (model.observed - model.intercept) / (model.sigma_x * model.sigma_x * tau);
    let mean = mu.mul(&Value::scalar(scale))?.add(&Value::scalar(shift))?;
    Distribution::normal(mean, Value::scalar(tau.sqrt().recip()))
}

/// Kernel that redraws the component block at `version` from its exact
/// conditional. Serves as forward kernel (new version) and reverse kernel
/// (old version) alike; inputs and outputs are `[z, v]`.
fn z_update(model: GibbsModel, version: u64) -> PrimitiveProgram {
    PrimitiveProgram::new(&format!("zcond{version}"), 2, move |scope, inputs| {
        let v = inputs[1].detach();
        let z = scope.sample(format!("z/{version}"), z_conditional(&model, &v)?)?;
        Ok(vec![z, v])
    })
}

/// Kernel that redraws the latent block at `version` from its exact
/// conditional.
fn v_update(model: GibbsModel, version: u64) -> PrimitiveProgram {
    PrimitiveProgram::new(&format!("vcond{version}"), 2, move |scope, inputs| {
        let z = inputs[0].detach();
        let v = scope.sample(format!("v/{version}"), v_conditional(&model, &z)?)?;
        Ok(vec![z, v])
    })
}

/// Assemble the population Gibbs sampler: an initial importance step, then
/// per sweep one resample-move update for each block. Block proposes carry
/// labels 1, 2, ... so recorded increments can be told apart from the
/// initial step (label 0).
pub fn pop_gibbs(model: GibbsModel, sweeps: usize) -> Result<Program> {
    let mut zi: u64 = 0;
    let mut vj: u64 = 0;
    let mut q = Program::propose_labeled(
        target_at(model, 0, 0).into(),
        initial_proposal(model).into(),
        0,
    )?;
    let mut label: u32 = 1;
    for _ in 0..sweeps {
        let fwd = z_update(model, zi + 1);
        let rev = z_update(model, zi);
        zi += 1;
        let target = Program::extend(target_at(model, zi, vj).into(), rev)?;
        let proposal = Program::compose(fwd.into(), Program::resample(q, 0)?);
        q = Program::propose_labeled(target, proposal, label)?;
        label += 1;

        let fwd = v_update(model, vj + 1);
        let rev = v_update(model, vj);
        vj += 1;
        let target = Program::extend(target_at(model, zi, vj).into(), rev)?;
        let proposal = Program::compose(fwd.into(), Program::resample(q, 0)?);
        q = Program::propose_labeled(target, proposal, label)?;
        label += 1;
    }
    Ok(q)
}

/// Objective that records each propose step's incremental log weights
/// instead of training anything.
#[derive(Default)]
pub struct IncrementRecorder {
    pub records: Mutex<Vec<(Option<u32>, Vec<f64>)>>,
}

impl LossFn for IncrementRecorder {
    fn loss(&self, args: &LossArgs) -> Result<Value> {
        self.records
            .lock()
            .expect("recorder lock")
            .push((args.label, args.log_incr.data().data().to_vec()));
        Ok(Value::scalar(0.0))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GibbsSummary {
    pub sweeps: usize,
    pub particles: usize,
    pub seed: u64,
    pub log_z_hat: f64,
    pub exact_log_z: f64,
    pub posterior_mean_v: f64,
    pub exact_posterior_mean_v: f64,
    /// Largest |incremental log weight| over all block updates; exact
    /// conditionals make this cancellation hold to floating-point error.
    pub max_block_increment: f64,
    pub proposes: usize,
    pub resamples: usize,
}

/// Run the sampler and compare against the closed-form answers.
pub fn run_gibbs(model: GibbsModel, sweeps: usize, particles: usize, seed: u64) -> Result<GibbsSummary> {
    let program = pop_gibbs(model, sweeps)?;
    let counts: NodeCounts = program.node_counts();
    let recorder = std::sync::Arc::new(IncrementRecorder::default());
    let mut session = Session::new(RandomStream::seeded(seed, 0))
        .with_sample_shape(vec![particles])
        .with_mode(SampleMode::Detached)
        .with_objective(recorder.clone());
    let out = program.run(&[], &mut session)?;

    let max_block_increment = recorder
        .records
        .lock()
        .expect("recorder lock")
        .iter()
        .filter(|(label, _)| label.map_or(false, |l| l >= 1))
        .flat_map(|(_, incr)| incr.iter().map(|x| x.abs()))
        .fold(0.0, f64::max);

    let v = out.outputs[1].data();
    let posterior_mean_v = v.data().iter().sum::<f64>() / v.len() as f64;

    Ok(GibbsSummary {
        sweeps,
        particles,
        seed,
        log_z_hat: log_z_hat(out.log_weight.value()),
        exact_log_z: model.exact_log_marginal(),
        posterior_mean_v,
        exact_posterior_mean_v: model.exact_posterior_mean_v(),
        max_block_increment,
        proposes: counts.proposes,
        resamples: counts.resamples,
    })
}
