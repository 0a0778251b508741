//! Reverse-mode autodiff over a per-run tape.
//!
//! A [`Value`] is an immutable tensor plus an optional handle to a node on a
//! [`Tape`]. Operations between plain constants never touch a tape (so
//! gradient-free evaluation pays nothing); as soon as one operand is tape-backed
//! the result is recorded. One tape is created per training step and dropped
//! afterwards; [`Parameter`]s live across steps and are re-leafed onto the
//! current tape at each use, with `backward` accumulating into their gradient
//! buffers (two backward calls therefore double parameter gradients — callers
//! zero grads between steps, which the optimizer does for them).
//!
//! Semantics pinned here:
//! - `log` of a non-positive input yields `-inf` rather than NaN, so zero
//!   probabilities stay representable in log space.
//! - the gradient of any element whose *forward* value is `-inf` is defined as
//!   zero: an off-support sample produces a zero-weight particle, never a
//!   poisoned gradient.
//! - `sub_log_guard(a, b)` is `a - b` except that it returns `-inf` (instead of
//!   NaN) when either operand is `-inf`; it is how log-weight ratios are formed.

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::tensor::{self, TensorData, TensorRef};

/// Recording tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Arc<Mutex<Vec<Node>>>,
}

struct Node {
    value: TensorRef,
    op: Op,
}

/// Operand reference: the tensor payload plus the node id when tape-backed.
#[derive(Clone)]
struct Src {
    node: Option<usize>,
    data: TensorRef,
}

enum Op {
    Param(Parameter),
    Add(Src, Src),
    Sub(Src, Src),
    SubLogGuard(Src, Src),
    Mul(Src, Src),
    Div(Src, Src),
    Neg(Src),
    Exp(Src),
    Log(Src),
    Pow(Src, f64),
    Relu(Src),
    Softplus(Src),
    Sigmoid(Src),
    SumAll(Src),
    MeanAll(Src),
    SumAxis(Src, usize),
    MeanAxis(Src, usize),
    LogSumExpAxis(Src, usize),
    Matmul(Src, Src),
    Gather0(Src, Arc<Vec<usize>>),
    BroadcastTo(Src),
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Arc::new(Mutex::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.inner.lock().unwrap();
        nodes.push(node);
        nodes.len() - 1
    }

    fn same_as(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

/// A tensor value, optionally carrying its gradient history.
#[derive(Clone)]
pub struct Value {
    data: TensorRef,
    node: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Value")
            .field("shape", &self.data.shape())
            .field("data", &self.data.data())
            .field("on_tape", &self.node.is_some())
            .finish()
    }
}

impl Value {
    pub fn constant(data: TensorData) -> Self {
        Value { data: Arc::new(data), node: None }
    }

    pub fn scalar(x: f64) -> Self {
        Value::constant(TensorData::scalar(x))
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Value::constant(TensorData::new(vec![n], data))
    }

    pub fn from_shape_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Value::constant(TensorData::new(shape, data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Value::constant(TensorData::zeros(shape))
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn rank(&self) -> usize {
        self.data.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data.item()
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, no gradient path.
    pub fn detach(&self) -> Value {
        Value { data: self.data.clone(), node: None }
    }

    fn src(&self) -> Src {
        Src { node: self.node.as_ref().map(|(_, i)| *i), data: self.data.clone() }
    }

    fn tape_of(a: &Value, b: Option<&Value>) -> Option<Tape> {
        match (&a.node, b.and_then(|b| b.node.as_ref())) {
            (Some((ta, _)), Some((tb, _))) => {
                assert!(ta.same_as(tb), "operands live on different tapes");
                Some(ta.clone())
            }
            (Some((t, _)), None) => Some(t.clone()),
            (None, Some((t, _))) => Some(t.clone()),
            (None, None) => None,
        }
    }

    fn record(tape: Option<Tape>, data: TensorData, op: impl FnOnce() -> Op) -> Value {
        let data = Arc::new(data);
        match tape {
            None => Value { data, node: None },
            Some(t) => {
                let id = t.push(Node { value: data.clone(), op: op() });
                Value { data, node: Some((t, id)) }
            }
        }
    }

    fn binary(
        &self,
        rhs: &Value,
        fwd: impl FnOnce(&TensorData, &TensorData) -> Result<TensorData>,
        op: impl FnOnce(Src, Src) -> Op,
    ) -> Result<Value> {
        let out = fwd(&self.data, &rhs.data)?;
        let tape = Value::tape_of(self, Some(rhs));
        Ok(Value::record(tape, out, || op(self.src(), rhs.src())))
    }

    fn unary(&self, fwd: impl FnOnce(&TensorData) -> TensorData, op: impl FnOnce(Src) -> Op) -> Value {
        let out = fwd(&self.data);
        let tape = Value::tape_of(self, None);
        Value::record(tape, out, || op(self.src()))
    }

    pub fn add(&self, rhs: &Value) -> Result<Value> {
        self.binary(rhs, |a, b| tensor::zip_map(a, b, |x, y| x + y), Op::Add)
    }

    pub fn sub(&self, rhs: &Value) -> Result<Value> {
        self.binary(rhs, |a, b| tensor::zip_map(a, b, |x, y| x - y), Op::Sub)
    }

    /// `a - b` in log space: `-inf` whenever either operand is `-inf`.
    pub fn sub_log_guard(&self, rhs: &Value) -> Result<Value> {
        self.binary(
            rhs,
            |a, b| {
                tensor::zip_map(a, b, |x, y| {
                    if x == f64::NEG_INFINITY || y == f64::NEG_INFINITY {
                        f64::NEG_INFINITY
                    } else {
                        x - y
                    }
                })
            },
            Op::SubLogGuard,
        )
    }

    pub fn mul(&self, rhs: &Value) -> Result<Value> {
        self.binary(rhs, |a, b| tensor::zip_map(a, b, |x, y| x * y), Op::Mul)
    }

    pub fn div(&self, rhs: &Value) -> Result<Value> {
        self.binary(rhs, |a, b| tensor::zip_map(a, b, |x, y| x / y), Op::Div)
    }

    pub fn neg(&self) -> Value {
        self.unary(|a| tensor::map(a, |x| -x), Op::Neg)
    }

    pub fn exp(&self) -> Value {
        self.unary(|a| tensor::map(a, f64::exp), Op::Exp)
    }

    /// Natural log; non-positive inputs map to `-inf`.
    pub fn log(&self) -> Value {
        self.unary(
            |a| tensor::map(a, |x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }),
            Op::Log,
        )
    }

    pub fn pow(&self, e: f64) -> Value {
        self.unary(|a| tensor::map(a, |x| x.powf(e)), |s| Op::Pow(s, e))
    }

    pub fn relu(&self) -> Value {
        self.unary(|a| tensor::map(a, |x| x.max(0.0)), Op::Relu)
    }

    pub fn softplus(&self) -> Value {
        self.unary(|a| tensor::map(a, tensor::softplus_scalar), Op::Softplus)
    }

    pub fn sigmoid(&self) -> Value {
        self.unary(|a| tensor::map(a, tensor::sigmoid_scalar), Op::Sigmoid)
    }

    pub fn sum_all(&self) -> Value {
        self.unary(tensor::sum_all, Op::SumAll)
    }

    pub fn mean_all(&self) -> Value {
        self.unary(tensor::mean_all, Op::MeanAll)
    }

    pub fn sum_axis(&self, axis: usize) -> Value {
        self.unary(|a| tensor::sum_axis(a, axis), |s| Op::SumAxis(s, axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Value {
        self.unary(|a| tensor::mean_axis(a, axis), |s| Op::MeanAxis(s, axis))
    }

    pub fn logsumexp_axis(&self, axis: usize) -> Value {
        self.unary(|a| tensor::logsumexp_axis(a, axis), |s| Op::LogSumExpAxis(s, axis))
    }

    pub fn matmul(&self, rhs: &Value) -> Result<Value> {
        self.binary(rhs, tensor::matmul, Op::Matmul)
    }

    /// Row selection along dim 0: `out[l] = self[idx[l]]`. Scalars (and any
    /// value without a leading dim to gather) pass through unchanged.
    pub fn gather0(&self, idx: &Arc<Vec<usize>>) -> Value {
        if self.rank() == 0 {
            return self.clone();
        }
        self.unary(|a| tensor::gather0(a, idx), |s| Op::Gather0(s, idx.clone()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Value> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let out = tensor::broadcast_to(&self.data, shape)?;
        let tape = Value::tape_of(self, None);
        Ok(Value::record(tape, out, || Op::BroadcastTo(self.src())))
    }
}

/// A named, trainable tensor living across training steps.
#[derive(Clone)]
pub struct Parameter(Arc<ParamInner>);

struct ParamInner {
    name: String,
    value: Mutex<TensorData>,
    grad: Mutex<Vec<f64>>,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: TensorData) -> Self {
        let n = value.len();
        Parameter(Arc::new(ParamInner {
            name: name.into(),
            value: Mutex::new(value),
            grad: Mutex::new(vec![0.0; n]),
            trainable: true,
        }))
    }

    pub fn frozen(name: impl Into<String>, value: TensorData) -> Self {
        let n = value.len();
        Parameter(Arc::new(ParamInner {
            name: name.into(),
            value: Mutex::new(value),
            grad: Mutex::new(vec![0.0; n]),
            trainable: false,
        }))
    }

    pub fn name(&self) -> String {
        self.0.name.clone()
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable
    }

    pub fn snapshot(&self) -> TensorData {
        self.0.value.lock().unwrap().clone()
    }

    pub fn set(&self, value: TensorData) {
        let mut v = self.0.value.lock().unwrap();
        debug_assert_eq!(v.shape(), value.shape(), "parameter shape is fixed");
        *v = value;
    }

    pub fn grad(&self) -> Vec<f64> {
        self.0.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        for g in self.0.grad.lock().unwrap().iter_mut() {
            *g = 0.0;
        }
    }

    /// Scale the accumulated gradient in place (gradient clipping).
    pub fn scale_grad(&self, factor: f64) {
        for g in self.0.grad.lock().unwrap().iter_mut() {
            *g *= factor;
        }
    }

    fn accumulate(&self, g: &[f64]) {
        let mut grad = self.0.grad.lock().unwrap();
        debug_assert_eq!(grad.len(), g.len());
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    /// Leaf this parameter's current value onto `tape` (or return a constant
    /// when evaluating without gradients).
    pub fn to_value(&self, tape: Option<&Tape>) -> Value {
        let data = Arc::new(self.snapshot());
        match tape {
            Some(t) if self.0.trainable => {
                let id = t.push(Node { value: data.clone(), op: Op::Param(self.clone()) });
                Value { data, node: Some((t.clone(), id)) }
            }
            _ => Value { data, node: None },
        }
    }

    fn ptr_eq(&self, other: &Parameter) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.0.name)
            .field("shape", &self.snapshot().shape().to_vec())
            .finish()
    }
}

/// Reverse pass from a scalar root, accumulating into every reachable
/// [`Parameter`]'s gradient buffer.
pub fn backward(root: &Value) -> Result<()> {
    if root.len() != 1 {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    let (tape, root_id) = match &root.node {
        Some((t, i)) => (t.clone(), *i),
        None => return Ok(()), // constant root: nothing reachable
    };
    let nodes = tape.inner.lock().unwrap();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[root_id] = Some(vec![1.0]);

    for id in (0..=root_id).rev() {
        let mut g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        let node = &nodes[id];
        // Off-support forward values contribute no gradient.
        for (ge, &v) in g.iter_mut().zip(node.value.data()) {
            if v == f64::NEG_INFINITY {
                *ge = 0.0;
            }
        }
        propagate(&node.op, &node.value, &g, &mut grads);
    }
    Ok(())
}

fn send(grads: &mut [Option<Vec<f64>>], src: &Src, contribution: Vec<f64>) {
    // Constants receive no gradient; Op::Param leaves are tape nodes.
    if let Some(pid) = src.node {
        let slot = grads[pid].get_or_insert_with(|| vec![0.0; src.data.len()]);
        for (dst, g) in slot.iter_mut().zip(contribution) {
            *dst += g;
        }
    }
}

/// Reduce a result-shaped gradient onto `src`'s shape, then accumulate it.
fn send_broadcast(grads: &mut [Option<Vec<f64>>], src: &Src, g_out: &[f64]) {
    if src.node.is_none() {
        return;
    }
    let reduced = tensor::reduce_to_shape(g_out, src.data.shape());
    send(grads, src, reduced);
}

fn propagate(op: &Op, out: &TensorRef, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Param(p) => p.accumulate(g),
        Op::Add(a, b) => {
            send_broadcast(grads, a, g);
            send_broadcast(grads, b, g);
        }
        Op::Sub(a, b) | Op::SubLogGuard(a, b) => {
            // For the guarded variant, -inf outputs already have zero gradient.
            send_broadcast(grads, a, g);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            send_broadcast(grads, b, &neg);
        }
        Op::Mul(a, b) => {
            let (la, lb) = (a.data.len().max(1), b.data.len().max(1));
            if a.node.is_some() {
                let da: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * b.data.data()[i % lb]).collect();
                send_broadcast(grads, a, &da);
            }
            if b.node.is_some() {
                let db: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * a.data.data()[i % la]).collect();
                send_broadcast(grads, b, &db);
            }
        }
        Op::Div(a, b) => {
            let (la, lb) = (a.data.len().max(1), b.data.len().max(1));
            if a.node.is_some() {
                let da: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi / b.data.data()[i % lb]).collect();
                send_broadcast(grads, a, &da);
            }
            if b.node.is_some() {
                let db: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let bv = b.data.data()[i % lb];
                        -gi * a.data.data()[i % la] / (bv * bv)
                    })
                    .collect();
                send_broadcast(grads, b, &db);
            }
        }
        Op::Neg(a) => {
            let da: Vec<f64> = g.iter().map(|x| -x).collect();
            send_broadcast(grads, a, &da);
        }
        Op::Exp(a) => {
            let da: Vec<f64> = g.iter().zip(out.data()).map(|(gi, &o)| gi * o).collect();
            send_broadcast(grads, a, &da);
        }
        Op::Log(a) => {
            // -inf outputs (x <= 0) were masked above; elsewhere d/dx = 1/x.
            let da: Vec<f64> = g.iter().zip(a.data.data()).map(|(gi, &x)| gi / x).collect();
            send_broadcast(grads, a, &da);
        }
        Op::Pow(a, e) => {
            let da: Vec<f64> =
                g.iter().zip(a.data.data()).map(|(gi, &x)| gi * e * x.powf(e - 1.0)).collect();
            send_broadcast(grads, a, &da);
        }
        Op::Relu(a) => {
            let da: Vec<f64> =
                g.iter().zip(a.data.data()).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect();
            send_broadcast(grads, a, &da);
        }
        Op::Softplus(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(a.data.data())
                .map(|(gi, &x)| gi * tensor::sigmoid_scalar(x))
                .collect();
            send_broadcast(grads, a, &da);
        }
        Op::Sigmoid(a) => {
            let da: Vec<f64> = g.iter().zip(out.data()).map(|(gi, &s)| gi * s * (1.0 - s)).collect();
            send_broadcast(grads, a, &da);
        }
        Op::SumAll(a) => {
            let da = vec![g[0]; a.data.len()];
            send(grads, a, da);
        }
        Op::MeanAll(a) => {
            let da = vec![g[0] / a.data.len() as f64; a.data.len()];
            send(grads, a, da);
        }
        Op::SumAxis(a, axis) => {
            let (outer, n, inner) = tensor::axis_split(a.data.shape(), *axis);
            let mut da = vec![0.0; a.data.len()];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        da[(o * n + k) * inner + i] = g[o * inner + i];
                    }
                }
            }
            send(grads, a, da);
        }
        Op::MeanAxis(a, axis) => {
            let (outer, n, inner) = tensor::axis_split(a.data.shape(), *axis);
            let mut da = vec![0.0; a.data.len()];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        da[(o * n + k) * inner + i] = g[o * inner + i] / n as f64;
                    }
                }
            }
            send(grads, a, da);
        }
        Op::LogSumExpAxis(a, axis) => {
            let (outer, n, inner) = tensor::axis_split(a.data.shape(), *axis);
            let mut da = vec![0.0; a.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let oi = o * inner + i;
                    let ov = out.data()[oi];
                    if ov == f64::NEG_INFINITY {
                        continue; // empty slice in log space: no gradient
                    }
                    for k in 0..n {
                        let xi = (o * n + k) * inner + i;
                        da[xi] = g[oi] * (a.data.data()[xi] - ov).exp();
                    }
                }
            }
            send(grads, a, da);
        }
        Op::Matmul(a, b) => {
            let g_t = TensorData::new(out.shape().to_vec(), g.to_vec());
            if a.node.is_some() {
                let da = tensor::matmul(&g_t, &tensor::transpose(&b.data)).expect("checked in forward");
                send(grads, a, da.data().to_vec());
            }
            if b.node.is_some() {
                let db = tensor::matmul(&tensor::transpose(&a.data), &g_t).expect("checked in forward");
                send(grads, b, db.data().to_vec());
            }
        }
        Op::Gather0(a, idx) => {
            let row = a.data.len() / a.data.shape()[0];
            let mut da = vec![0.0; a.data.len()];
            for (l, &j) in idx.iter().enumerate() {
                for r in 0..row {
                    da[j * row + r] += g[l * row + r];
                }
            }
            send(grads, a, da);
        }
        Op::BroadcastTo(a) => {
            send_broadcast(grads, a, g);
        }
    }
}

/// Central-difference gradient of `f` w.r.t. every coordinate of `params`,
/// for checking tape gradients against an independent oracle.
pub fn central_difference(params: &[Parameter], mut f: impl FnMut() -> Result<f64>, h: f64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let base = p.snapshot();
        let mut g = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = base.data().to_vec();
            plus[i] += h;
            p.set(TensorData::new(base.shape().to_vec(), plus));
            let f_plus = f()?;
            let mut minus = base.data().to_vec();
            minus[i] -= h;
            p.set(TensorData::new(base.shape().to_vec(), minus));
            let f_minus = f()?;
            g.push((f_plus - f_minus) / (2.0 * h));
        }
        p.set(base);
        out.push(g);
    }
    Ok(out)
}

/// Deduplicate parameters by identity, preserving first-seen order.
pub fn unique_params(params: &[Parameter]) -> Vec<Parameter> {
    let mut out: Vec<Parameter> = Vec::new();
    for p in params {
        if !out.iter().any(|q| q.ptr_eq(p)) {
            out.push(p.clone());
        }
    }
    out
}
