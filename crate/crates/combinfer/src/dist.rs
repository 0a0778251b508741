//! Distributions over tape values.
//!
//! Parameters are [`Value`]s, so densities stay differentiable when parameters
//! come off a network head. Parameter domains are validated eagerly at
//! construction (sigma > 0, probabilities in [0,1] and rows summing to 1 within
//! 1e-6); *values* are never validated eagerly — evaluating a log density at an
//! out-of-support point yields `-inf` (a zero-probability particle), not an
//! error, which is what substitution of foreign traces requires.
//!
//! Shape convention: a draw's shape is `sample_shape ++ event_shape`, where the
//! event shape is `[]` for scalar-event families and the trailing parameter dim
//! for vector-event families. Parameters broadcast into the draw under the
//! leading-dim rule, so per-sample parameters (from a kernel head) and shared
//! parameters both work. `log_prob` reduces the event dims and returns one log
//! density per sample.


use crate::autodiff::Value;
use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::tensor::{self};

const LOG_2PI: f64 = 1.8378770664093453; // ln(2*pi)

#[derive(Clone, Debug)]
pub enum Distribution {
    /// Scalar-event Gaussian.
    Normal { mean: Value, std: Value },
    /// Diagonal-covariance Gaussian; the trailing dim is the event dim.
    MvNormalDiag { mean: Value, std: Value },
    /// {0, 1}-valued coin with success probability `p`.
    Bernoulli { p: Value },
    /// Index-valued (0..K) finite distribution; trailing dim of `probs` is K.
    Categorical { probs: Value },
    /// One-hot-vector-valued finite distribution.
    OneHotCategorical { probs: Value },
}

fn validate_positive(name: &str, v: &Value) -> Result<()> {
    if v.data().data().iter().all(|&x| x > 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive and finite")))
    }
}

fn validate_probs(name: &str, v: &Value) -> Result<()> {
    let data = v.data();
    if data.rank() == 0 || data.shape()[data.rank() - 1] == 0 {
        return Err(Error::InvalidParameter(format!("{name} needs a trailing category dim")));
    }
    let k = data.shape()[data.rank() - 1];
    for row in data.data().chunks(k) {
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidParameter(format!("{name} must lie in [0, 1]")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!("{name} rows must sum to 1, got {s}")));
        }
    }
    Ok(())
}

impl Distribution {
    pub fn normal(mean: Value, std: Value) -> Result<Self> {
        validate_positive("std", &std)?;
        Ok(Distribution::Normal { mean, std })
    }

    pub fn mv_normal_diag(mean: Value, std: Value) -> Result<Self> {
        validate_positive("std", &std)?;
        if mean.rank() == 0 || std.rank() == 0 {
            return Err(Error::InvalidParameter("diagonal Gaussian needs a trailing event dim".into()));
        }
        Ok(Distribution::MvNormalDiag { mean, std })
    }

    pub fn bernoulli(p: Value) -> Result<Self> {
        if p.data().data().iter().all(|&x| (0.0..=1.0).contains(&x)) {
            Ok(Distribution::Bernoulli { p })
        } else {
            Err(Error::InvalidParameter("bernoulli p must lie in [0, 1]".into()))
        }
    }

    pub fn categorical(probs: Value) -> Result<Self> {
        validate_probs("probs", &probs)?;
        Ok(Distribution::Categorical { probs })
    }

    pub fn one_hot_categorical(probs: Value) -> Result<Self> {
        validate_probs("probs", &probs)?;
        Ok(Distribution::OneHotCategorical { probs })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Distribution::Normal { .. } => "normal",
            Distribution::MvNormalDiag { .. } => "mv-normal-diag",
            Distribution::Bernoulli { .. } => "bernoulli",
            Distribution::Categorical { .. } => "categorical",
            Distribution::OneHotCategorical { .. } => "one-hot-categorical",
        }
    }

    pub fn reparameterizable(&self) -> bool {
        matches!(self, Distribution::Normal { .. } | Distribution::MvNormalDiag { .. })
    }

    /// Whether every outcome can be enumerated (finite support).
    pub fn enumerable(&self) -> bool {
        !self.reparameterizable()
    }

    fn params_shape(&self) -> Result<Vec<usize>> {
        match self {
            Distribution::Normal { mean, std } | Distribution::MvNormalDiag { mean, std } => {
                tensor::broadcast_shape(mean.shape(), std.shape())
            }
            Distribution::Bernoulli { p } => Ok(p.shape().to_vec()),
            Distribution::Categorical { probs } | Distribution::OneHotCategorical { probs } => {
                Ok(probs.shape().to_vec())
            }
        }
    }

    /// Trailing event dims of one draw.
    pub fn event_shape(&self) -> Result<Vec<usize>> {
        let ps = self.params_shape()?;
        Ok(match self {
            Distribution::Normal { .. } | Distribution::Bernoulli { .. } | Distribution::Categorical { .. } => vec![],
            Distribution::MvNormalDiag { .. } | Distribution::OneHotCategorical { .. } => {
                vec![ps[ps.len() - 1]]
            }
        })
    }

    fn draw_shape(&self, sample_shape: &[usize]) -> Result<Vec<usize>> {
        let mut s = sample_shape.to_vec();
        s.extend(self.event_shape()?);
        Ok(s)
    }

    /// Draw a detached value of shape `sample_shape ++ event_shape`.
    pub fn sample(&self, rng: &mut RandomStream, sample_shape: &[usize]) -> Result<Value> {
        let shape = self.draw_shape(sample_shape)?;
        match self {
            Distribution::Normal { mean, std } | Distribution::MvNormalDiag { mean, std } => {
                let m = tensor::broadcast_to(mean.data(), &shape)?;
                let s = tensor::broadcast_to(std.data(), &shape)?;
                let eps = rng.standard_normal(m.len())?;
                let data: Vec<f64> =
                    m.data().iter().zip(s.data()).zip(&eps).map(|((m, s), e)| m + s * e).collect();
                Ok(Value::from_shape_vec(shape, data))
            }
            Distribution::Bernoulli { p } => {
                let p = tensor::broadcast_to(p.data(), &shape)?;
                let mut data = Vec::with_capacity(p.len());
                for &pi in p.data() {
                    data.push(rng.categorical(&[1.0 - pi, pi])? as f64);
                }
                Ok(Value::from_shape_vec(shape, data))
            }
            Distribution::Categorical { probs } => {
                let idx = self.draw_indices(probs, rng, &shape)?;
                Ok(Value::from_shape_vec(shape, idx.iter().map(|&i| i as f64).collect()))
            }
            Distribution::OneHotCategorical { probs } => {
                let k = probs.shape()[probs.rank() - 1];
                let lead = &shape[..shape.len() - 1];
                let idx = self.draw_indices(probs, rng, lead)?;
                let mut data = vec![0.0; idx.len() * k];
                for (row, &i) in idx.iter().enumerate() {
                    data[row * k + i] = 1.0;
                }
                Ok(Value::from_shape_vec(shape, data))
            }
        }
    }

    fn draw_indices(&self, probs: &Value, rng: &mut RandomStream, lead: &[usize]) -> Result<Vec<usize>> {
        let k = probs.shape()[probs.rank() - 1];
        let mut full = lead.to_vec();
        full.push(k);
        let p = tensor::broadcast_to(probs.data(), &full)?;
        let mut idx = Vec::with_capacity(tensor::numel(lead));
        for row in p.data().chunks(k) {
            idx.push(rng.categorical(row)?);
        }
        Ok(idx)
    }

    /// Reparameterized draw: `mean + std * eps` with constant noise, so the
    /// result carries the parameters' gradient paths.
    pub fn rsample(&self, rng: &mut RandomStream, sample_shape: &[usize]) -> Result<Value> {
        match self {
            Distribution::Normal { mean, std } | Distribution::MvNormalDiag { mean, std } => {
                let shape = self.draw_shape(sample_shape)?;
                let eps = Value::from_shape_vec(shape.clone(), rng.standard_normal(tensor::numel(&shape))?);
                mean.add(&std.mul(&eps)?)?.broadcast_to(&shape)
            }
            _ => Err(Error::NotReparameterizable(self.kind())),
        }
    }

    /// Per-sample log density, with `-inf` at out-of-support values.
    pub fn log_prob(&self, x: &Value) -> Result<Value> {
        match self {
            Distribution::Normal { mean, std } => normal_elementwise(x, mean, std),
            Distribution::MvNormalDiag { mean, std } => {
                let lp = normal_elementwise(x, mean, std)?;
                Ok(lp.sum_axis(lp.rank() - 1))
            }
            Distribution::Bernoulli { p } => bernoulli_log_prob(p, x),
            Distribution::Categorical { probs } => {
                let idx: Vec<Option<usize>> = x
                    .data()
                    .data()
                    .iter()
                    .map(|&v| {
                        let k = probs.shape()[probs.rank() - 1];
                        if v.fract() == 0.0 && v >= 0.0 && (v as usize) < k {
                            Some(v as usize)
                        } else {
                            None
                        }
                    })
                    .collect();
                select_log(probs, x.shape(), idx)
            }
            Distribution::OneHotCategorical { probs } => {
                let k = probs.shape()[probs.rank() - 1];
                if x.rank() == 0 || x.shape()[x.rank() - 1] != k {
                    return Err(Error::ShapeMismatch { expected: vec![k], got: x.shape().to_vec() });
                }
                let idx: Vec<Option<usize>> = x.data().data().chunks(k).map(decode_one_hot).collect();
                let lead = x.shape()[..x.rank() - 1].to_vec();
                select_log(probs, &lead, idx)
            }
        }
    }
}

fn normal_elementwise(x: &Value, mean: &Value, std: &Value) -> Result<Value> {
    // -((x - mean)/std)^2 / 2 - ln(std) - ln(2*pi)/2
    let z = x.sub(mean)?.div(std)?;
    let quad = z.mul(&z)?.mul(&Value::scalar(-0.5))?;
    quad.sub(&std.log())?.sub(&Value::scalar(0.5 * LOG_2PI))
}

fn decode_one_hot(row: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return None;
            }
            hot = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hot
}

/// log probs[..., idx] per leading element, `-inf` for invalid selections.
/// NaN-free even when some probabilities are exactly zero: unselected entries
/// are never touched, and the gradient flows only into selected coordinates.
fn select_log(probs: &Value, lead: &[usize], idx: Vec<Option<usize>>) -> Result<Value> {
    let k = probs.shape()[probs.rank() - 1];
    let mut full = lead.to_vec();
    full.push(k);
    let p = probs.broadcast_to(&full)?;
    // Forward pass.
    let mut data = Vec::with_capacity(idx.len());
    for (row, sel) in p.data().data().chunks(k).zip(&idx) {
        data.push(match sel {
            Some(i) if row[*i] > 0.0 => row[*i].ln(),
            _ => f64::NEG_INFINITY,
        });
    }
    let lp = Value::from_shape_vec(lead.to_vec(), data);
    if !p.is_on_tape() {
        return Ok(lp);
    }
    // Differentiable route: gather the selected probabilities with a one-hot
    // mask whose invalid/zero rows are excluded, then take the log. Rows that
    // were forced to -inf get zero gradient via the -inf rule.
    let mut mask = vec![0.0; p.len()];
    let mut floor = vec![0.0; idx.len()];
    for (r, sel) in idx.iter().enumerate() {
        match sel {
            Some(i) if p.data().data()[r * k + i] > 0.0 => mask[r * k + i] = 1.0,
            _ => floor[r] = f64::NEG_INFINITY,
        }
    }
    let picked = p
        .mul(&Value::from_shape_vec(full.clone(), mask))?
        .sum_axis(full.len() - 1);
    picked.log().add(&Value::from_shape_vec(lead.to_vec(), floor))
}

/// Numerically careful Bernoulli log density with support masking.
fn bernoulli_log_prob(p: &Value, x: &Value) -> Result<Value> {
    let shape = tensor::broadcast_shape(p.shape(), x.shape())?;
    let xb = tensor::broadcast_to(x.data(), &shape)?;
    // Support mask: 0 where x is a valid coin value, -inf elsewhere.
    let mask: Vec<f64> = xb
        .data()
        .iter()
        .map(|&v| if v == 0.0 || v == 1.0 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    if !p.is_on_tape() {
        let pb = tensor::broadcast_to(p.data(), &shape)?;
        let data: Vec<f64> = pb
            .data()
            .iter()
            .zip(xb.data())
            .zip(&mask)
            .map(|((&pi, &xi), &m)| {
                if m == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else if xi == 1.0 {
                    if pi > 0.0 { pi.ln() } else { f64::NEG_INFINITY }
                } else if pi < 1.0 {
                    (-pi).ln_1p()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        return Ok(Value::from_shape_vec(shape, data));
    }
    // Tape route: select p or (1 - p) per element; interior parameters keep
    // both logs finite, and the mask forces off-support elements to -inf.
    let xv = Value::constant(xb.clone());
    let xc: Vec<f64> = xb.data().iter().map(|&v| if v == 1.0 { 0.0 } else { 1.0 }).collect();
    let sel = xv
        .mul(&p.log())?
        .add(&Value::from_shape_vec(shape.clone(), xc).mul(&Value::scalar(1.0).sub(p)?.log())?)?;
    sel.add(&Value::from_shape_vec(shape, mask))
}

/// Convenience constructors used across examples and experiments.
pub fn normal(mean: f64, std: f64) -> Distribution {
    Distribution::normal(Value::scalar(mean), Value::scalar(std)).expect("static parameters")
}

pub fn bernoulli(p: f64) -> Distribution {
    Distribution::bernoulli(Value::scalar(p)).expect("static parameters")
}

pub fn categorical(probs: Vec<f64>) -> Distribution {
    Distribution::categorical(Value::vector(probs)).expect("static parameters")
}

/// Per-row Categorical from per-sample rows of shape `lead ++ [K]`.
pub fn categorical_rows(probs: Value) -> Result<Distribution> {
    Distribution::categorical(probs)
}

pub fn one_hot_categorical(probs: Vec<f64>) -> Distribution {
    Distribution::one_hot_categorical(Value::vector(probs)).expect("static parameters")
}

pub fn mv_normal_diag(mean: Vec<f64>, std: Vec<f64>) -> Distribution {
    Distribution::mv_normal_diag(Value::vector(mean), Value::vector(std)).expect("static parameters")
}
