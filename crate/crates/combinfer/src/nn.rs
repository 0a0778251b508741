//! Neural proposal kernels and the Adam optimizer.
//!
//! The kernel network maps a batch of positions `[L, D]` to a diagonal
//! Gaussian over the next position: one shared hidden layer, a mean head with
//! an input skip connection (so a zeroed network is the identity flow), and a
//! softplus std head. Parameters are [`Parameter`]s re-leafed onto the active
//! tape at every forward pass.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Value};
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::tensor::TensorData;

/// Lower bound on the produced std. The head is `STD_FLOOR + softplus(pre)`:
/// without the floor, a saturated pre-activation drives the std to zero and a
/// single off-distribution input can poison a whole particle population with
/// astronomically negative log densities.
pub const STD_FLOOR: f64 = 0.01;

/// Bias for the std head so that `STD_FLOOR + softplus(bias) = 1` at
/// initialization.
pub const STD_BIAS_INIT: f64 = 0.5254587192925019; // ln(e^0.99 - 1)

fn uniform_init(rng: &mut RandomStream, shape: Vec<usize>, fan_in: usize) -> Result<TensorData> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push((rng.uniform()? * 2.0 - 1.0) * bound);
    }
    Ok(TensorData::new(shape, data))
}

/// MLP kernel head producing a diagonal Gaussian over `dim`-dimensional moves.
#[derive(Clone)]
pub struct GaussianKernelNet {
    pub dim: usize,
    pub hidden: usize,
    w1: Parameter,
    b1: Parameter,
    w_mean: Parameter,
    b_mean: Parameter,
    w_std: Parameter,
    b_std: Parameter,
}

impl GaussianKernelNet {
    /// Random initialization: all linear layers U(+-1/sqrt(fan_in)), except the
    /// std-head bias which is pinned so the initial std is one.
    pub fn new(name: &str, dim: usize, hidden: usize, rng: &mut RandomStream) -> Result<Self> {
        Ok(GaussianKernelNet {
            dim,
            hidden,
            w1: Parameter::new(&format!("{name}/w1"), uniform_init(rng, vec![dim, hidden], dim)?),
            b1: Parameter::new(&format!("{name}/b1"), uniform_init(rng, vec![hidden], dim)?),
            w_mean: Parameter::new(&format!("{name}/w_mean"), uniform_init(rng, vec![hidden, dim], hidden)?),
            b_mean: Parameter::new(&format!("{name}/b_mean"), uniform_init(rng, vec![dim], hidden)?),
            w_std: Parameter::new(&format!("{name}/w_std"), uniform_init(rng, vec![hidden, dim], hidden)?),
            b_std: Parameter::new(&format!("{name}/b_std"), TensorData::full(&[dim], STD_BIAS_INIT)),
        })
    }

    /// All-zero weights and biases: the mean head is the identity (skip
    /// connection only) and the std is `STD_FLOOR + softplus(0)` everywhere.
    pub fn zeros(name: &str, dim: usize, hidden: usize) -> Self {
        let z = |suffix: &str, shape: Vec<usize>| {
            Parameter::new(&format!("{name}/{suffix}"), TensorData::zeros(&shape))
        };
        GaussianKernelNet {
            dim,
            hidden,
            w1: z("w1", vec![dim, hidden]),
            b1: z("b1", vec![hidden]),
            w_mean: z("w_mean", vec![hidden, dim]),
            b_mean: z("b_mean", vec![dim]),
            w_std: z("w_std", vec![hidden, dim]),
            b_std: z("b_std", vec![dim]),
        }
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w_mean.clone(),
            self.b_mean.clone(),
            self.w_std.clone(),
            self.b_std.clone(),
        ]
    }

    /// Forward pass over a `[L, dim]` batch; returns (mean, std), each `[L, dim]`.
    pub fn forward(&self, input: &Value, tape: Option<&Tape>) -> Result<(Value, Value)> {
        if input.rank() != 2 || input.shape()[1] != self.dim {
            return Err(Error::ShapeMismatch {
                expected: vec![0, self.dim],
                got: input.shape().to_vec(),
            });
        }
        let h = input
            .matmul(&self.w1.to_value(tape))?
            .add(&self.b1.to_value(tape))?
            .relu();
        let mean = h
            .matmul(&self.w_mean.to_value(tape))?
            .add(&self.b_mean.to_value(tape))?
            .add(input)?;
        let std = h
            .matmul(&self.w_std.to_value(tape))?
            .add(&self.b_std.to_value(tape))?
            .softplus()
            .add(&Value::scalar(STD_FLOOR))?;
        Ok((mean, std))
    }

    /// The kernel's conditional distribution given the previous positions.
    pub fn distribution(&self, input: &Value, tape: Option<&Tape>) -> Result<Distribution> {
        let (mean, std) = self.forward(input, tape)?;
        Distribution::mv_normal_diag(mean, std)
    }
}

/// Rescale gradients so their joint L2 norm is at most `max_norm`; returns
/// the pre-clip norm. Score-function objectives occasionally produce outlier
/// gradients orders of magnitude above typical; clipping bounds the damage a
/// single batch can do without biasing well-behaved steps.
pub fn clip_grad_norm(params: &[Parameter], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .map(|p| p.grad().iter().map(|g| g * g).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / norm;
        for p in params {
            p.scale_grad(factor);
        }
    }
    norm
}

/// Adam with bias correction. Gradients are read from the parameters' own
/// accumulators and zeroed after every step.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    params: Vec<Parameter>,
    lr_scale: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: Vec<Parameter>, lr: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.snapshot().len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.snapshot().len()]).collect();
        let lr_scale = vec![1.0; params.len()];
        Adam { lr, beta1: 0.9, beta2: 0.99, eps: 1e-8, step: 0, params, lr_scale, m, v }
    }

    /// Give every parameter whose name starts with `prefix` a per-group
    /// learning-rate multiplier.
    pub fn scale_group(&mut self, prefix: &str, scale: f64) {
        for (p, s) in self.params.iter().zip(&mut self.lr_scale) {
            if p.name().starts_with(prefix) {
                *s = scale;
            }
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn step(&mut self) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            if !p.trainable() {
                p.zero_grad();
                continue;
            }
            let grad = p.grad();
            let snap = p.snapshot();
            let mut data = snap.data().to_vec();
            let lr = self.lr * self.lr_scale[i];
            for (j, &g) in grad.iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.set(TensorData::new(snap.shape().to_vec(), data));
            p.zero_grad();
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerRecord {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// On-disk training state: parameter tensors plus optimizer moments.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    params: Vec<ParamRecord>,
    optimizer: OptimizerRecord,
}

pub fn save_checkpoint(path: &Path, opt: &Adam) -> Result<()> {
    let ck = Checkpoint {
        step: opt.step,
        params: opt
            .params
            .iter()
            .map(|p| {
                let snap = p.snapshot();
                ParamRecord {
                    name: p.name().to_string(),
                    shape: snap.shape().to_vec(),
                    data: snap.data().to_vec(),
                }
            })
            .collect(),
        optimizer: OptimizerRecord {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            step: opt.step,
            m: opt.m.clone(),
            v: opt.v.clone(),
        },
    };
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(&ck)?.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, opt: &mut Adam) -> Result<()> {
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ck.params.len() != opt.params.len() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint has {} parameters, model has {}",
            ck.params.len(),
            opt.params.len()
        )));
    }
    for (rec, p) in ck.params.iter().zip(&opt.params) {
        if rec.name != p.name() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint parameter {} does not match model parameter {}",
                rec.name,
                p.name()
            )));
        }
        p.set(TensorData::new(rec.shape.clone(), rec.data.clone()));
    }
    opt.lr = ck.optimizer.lr;
    opt.beta1 = ck.optimizer.beta1;
    opt.beta2 = ck.optimizer.beta2;
    opt.eps = ck.optimizer.eps;
    opt.step = ck.optimizer.step;
    opt.m = ck.optimizer.m;
    opt.v = ck.optimizer.v;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;

    #[test]
    fn zeroed_network_is_identity_flow_with_floored_ln2_std() {
        let net = GaussianKernelNet::zeros("k", 2, 50);
        let c = Value::from_shape_vec(vec![3, 2], vec![1.0, -2.0, 0.5, 4.0, 0.0, 0.0]);
        let (mean, std) = net.forward(&c, None).unwrap();
        assert_eq!(mean.data().data(), c.data().data());
        let expected = STD_FLOOR + std::f64::consts::LN_2;
        for &s in std.data().data() {
            assert!((s - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn std_never_drops_below_the_floor() {
        let mut rng = RandomStream::seeded(3, 0);
        let net = GaussianKernelNet::new("k", 2, 16, &mut rng).unwrap();
        // Drive the std head as negative as the parameters allow.
        let c = Value::from_shape_vec(vec![2, 2], vec![1e6, -1e6, -1e6, 1e6]);
        let (_, std) = net.forward(&c, None).unwrap();
        for &s in std.data().data() {
            assert!(s >= STD_FLOOR, "std {s}");
        }
    }

    #[test]
    fn fresh_network_has_unit_std_and_bounded_weights() {
        let mut rng = RandomStream::seeded(7, 0);
        let net = GaussianKernelNet::new("k", 2, 50, &mut rng).unwrap();
        let c = Value::from_shape_vec(vec![4, 2], vec![0.0; 8]);
        let (_, std) = net.forward(&c, None).unwrap();
        // At the origin the hidden activations are relu(b1); the std head sees
        // small weights, so std stays near softplus(STD_BIAS_INIT) = 1.
        for &s in std.data().data() {
            assert!((s - 1.0).abs() < 0.5, "std {s}");
        }
        let bound = 1.0 / (2.0f64).sqrt();
        for w in net.w1.snapshot().data() {
            assert!(w.abs() <= bound);
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // With bias correction, the first step is lr * g / (|g| + eps') ~ lr * sign(g).
        let p = Parameter::new("p", TensorData::vector(vec![1.0, 1.0]));
        let mut opt = Adam::new(vec![p.clone()], 0.01);
        let tape = Tape::new();
        let v = p.to_value(Some(&tape));
        let loss = v.mul(&Value::vector(vec![3.0, -0.5])).unwrap().sum_all();
        backward(&loss).unwrap();
        opt.step();
        let got = p.snapshot();
        assert!((got.data()[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((got.data()[1] - (1.0 + 0.01)).abs() < 1e-6);
        // Gradients were zeroed by the step.
        assert!(p.grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let p = Parameter::new("p", TensorData::scalar(5.0));
        let mut opt = Adam::new(vec![p.clone()], 0.1);
        for _ in 0..500 {
            let tape = Tape::new();
            let v = p.to_value(Some(&tape));
            let loss = v.mul(&v).unwrap();
            backward(&loss).unwrap();
            opt.step();
        }
        assert!(p.snapshot().data()[0].abs() < 0.1);
    }

    #[test]
    fn checkpoint_roundtrip_restores_params_and_moments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");

        let mut rng = RandomStream::seeded(3, 0);
        let net = GaussianKernelNet::new("k", 2, 8, &mut rng).unwrap();
        let mut opt = Adam::new(net.params(), 0.05);
        // Take two steps so the moments are non-trivial.
        for _ in 0..2 {
            let tape = Tape::new();
            let c = Value::from_shape_vec(vec![2, 2], vec![0.3, -0.7, 1.0, 0.2]);
            let (mean, _) = net.forward(&c, Some(&tape)).unwrap();
            backward(&mean.sum_all()).unwrap();
            opt.step();
        }
        let frozen: Vec<Vec<f64>> = net.params().iter().map(|p| p.snapshot().data().to_vec()).collect();
        save_checkpoint(&path, &opt).unwrap();

        let net2 = GaussianKernelNet::zeros("k", 2, 8);
        let mut opt2 = Adam::new(net2.params(), 0.0);
        load_checkpoint(&path, &mut opt2).unwrap();
        assert_eq!(opt2.step_count(), 2);
        assert!((opt2.lr - 0.05).abs() < 1e-15);
        for (a, p) in frozen.iter().zip(net2.params()) {
            assert_eq!(a, &p.snapshot().data().to_vec());
        }
        assert_eq!(opt.m, opt2.m);
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut rng = RandomStream::seeded(11, 0);
        let net = GaussianKernelNet::new("k", 2, 16, &mut rng).unwrap();
        let tape = Tape::new();
        let c = Value::from_shape_vec(vec![5, 2], (0..10).map(|i| i as f64 * 0.1).collect());
        let (mean, std) = net.forward(&c, Some(&tape)).unwrap();
        let loss = mean.sum_all().add(&std.sum_all()).unwrap();
        backward(&loss).unwrap();
        for p in net.params() {
            assert!(p.grad().iter().any(|&g| g != 0.0), "no gradient for {}", p.name());
        }
    }
}
