//! Dense row-major `f64` tensors.
//!
//! This is the raw numeric layer under [`crate::autodiff::Value`]. It knows nothing
//! about tapes or gradients; it implements shapes, the leading-dim broadcasting rule,
//! and the elementwise/reduction/matmul kernels the rest of the crate needs.
//!
//! Broadcasting rule: two shapes are compatible when one is a suffix of the other
//! (the smaller operand tiles along the extra leading dims) or either is a scalar.
//! With row-major layout this makes the smaller operand's flat index simply
//! `i % smaller.len()`, which every kernel below relies on.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable tensor payload: a shape and a row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape/buffer length mismatch");
        TensorData { shape, data }
    }

    pub fn scalar(x: f64) -> Self {
        TensorData { shape: vec![], data: vec![x] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        TensorData { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], x: f64) -> Self {
        TensorData { shape: shape.to_vec(), data: vec![x; numel(shape)] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        TensorData { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on a multi-element tensor");
        self.data[0]
    }
}

pub type TensorRef = Arc<TensorData>;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Result shape of broadcasting `a` against `b`, or an error when neither
/// shape is a suffix of the other.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(Error::ShapeMismatch { expected: a.to_vec(), got: b.to_vec() })
    }
}

/// Apply `f` elementwise under the suffix-broadcast rule.
pub fn zip_map(a: &TensorData, b: &TensorData, f: impl Fn(f64, f64) -> f64) -> Result<TensorData> {
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let n = numel(&shape);
    let (la, lb) = (a.data.len().max(1), b.data.len().max(1));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(f(a.data[i % la], b.data[i % lb]));
    }
    Ok(TensorData::new(shape, out))
}

pub fn map(a: &TensorData, f: impl Fn(f64) -> f64) -> TensorData {
    TensorData::new(a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
}

/// Fold `src`-shaped gradient contributions back down to `dst_shape`
/// (summing over the broadcast leading dims). `src.len()` must be a
/// multiple of `numel(dst_shape)`.
pub fn reduce_to_shape(src: &[f64], dst_shape: &[usize]) -> Vec<f64> {
    let n = numel(dst_shape).max(1);
    let mut out = vec![0.0; n];
    for (i, &g) in src.iter().enumerate() {
        out[i % n] += g;
    }
    out
}

/// Decompose `shape` around `axis` into (outer, axis length, inner) extents,
/// so flat index = (o * n + k) * inner + i.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    debug_assert!(axis < shape.len());
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

pub fn shape_without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

pub fn sum_all(a: &TensorData) -> TensorData {
    TensorData::scalar(a.data.iter().sum())
}

pub fn mean_all(a: &TensorData) -> TensorData {
    TensorData::scalar(a.data.iter().sum::<f64>() / a.data.len() as f64)
}

pub fn sum_axis(a: &TensorData, axis: usize) -> TensorData {
    let (outer, n, inner) = axis_split(&a.shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                out[o * inner + i] += a.data[(o * n + k) * inner + i];
            }
        }
    }
    TensorData::new(shape_without_axis(&a.shape, axis), out)
}

pub fn mean_axis(a: &TensorData, axis: usize) -> TensorData {
    let n = a.shape[axis] as f64;
    let mut t = sum_axis(a, axis);
    for x in &mut t.data {
        *x /= n;
    }
    t
}

/// Log-sum-exp along `axis`, stable against -inf entries; an all-(-inf)
/// slice reduces to -inf without producing NaN.
pub fn logsumexp_axis(a: &TensorData, axis: usize) -> TensorData {
    let (outer, n, inner) = axis_split(&a.shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| a.data[(o * n + k) * inner + i];
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(at(k));
            }
            out[o * inner + i] = if m == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                let s: f64 = (0..n).map(|k| (at(k) - m).exp()).sum();
                m + s.ln()
            };
        }
    }
    TensorData::new(shape_without_axis(&a.shape, axis), out)
}

/// Rank-2 matrix product \[m,k\] x \[k,n\] -> \[m,n\].
pub fn matmul(a: &TensorData, b: &TensorData) -> Result<TensorData> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch { expected: a.shape.clone(), got: b.shape.clone() });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a.data[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b.data[l * n + j];
            }
        }
    }
    Ok(TensorData::new(vec![m, n], out))
}

/// Rank-2 transpose.
pub fn transpose(a: &TensorData) -> TensorData {
    debug_assert_eq!(a.rank(), 2);
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    TensorData::new(vec![n, m], out)
}

/// Select rows along dim 0: out[l, ...] = a[idx[l], ...].
pub fn gather0(a: &TensorData, idx: &[usize]) -> TensorData {
    debug_assert!(a.rank() >= 1);
    let row = a.data.len() / a.shape[0];
    let mut shape = a.shape.clone();
    shape[0] = idx.len();
    let mut out = Vec::with_capacity(idx.len() * row);
    for &j in idx {
        debug_assert!(j < a.shape[0]);
        out.extend_from_slice(&a.data[j * row..(j + 1) * row]);
    }
    TensorData::new(shape, out)
}

/// Tile `a` out to `shape` under the suffix-broadcast rule.
pub fn broadcast_to(a: &TensorData, shape: &[usize]) -> Result<TensorData> {
    let out_shape = broadcast_shape(&a.shape, shape)?;
    if out_shape != shape {
        return Err(Error::ShapeMismatch { expected: shape.to_vec(), got: a.shape.clone() });
    }
    let n = numel(shape);
    let la = a.data.len().max(1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(a.data[i % la]);
    }
    Ok(TensorData::new(shape.to_vec(), out))
}

/// Numerically stable softplus: log(1 + e^x) = log1p(e^{-|x|}) + max(x, 0).
pub fn softplus_scalar(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_suffix_rule() {
        assert_eq!(broadcast_shape(&[3, 2], &[2]).unwrap(), vec![3, 2]);
        assert_eq!(broadcast_shape(&[2], &[3, 2]).unwrap(), vec![3, 2]);
        assert_eq!(broadcast_shape(&[], &[4]).unwrap(), vec![4]);
        assert!(broadcast_shape(&[3, 2], &[3]).is_err());
    }

    #[test]
    fn zip_map_tiles_smaller_operand() {
        let a = TensorData::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = TensorData::new(vec![2], vec![10.0, 20.0]);
        let c = zip_map(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn reduce_to_shape_sums_leading_dims() {
        // [2,2] gradient folded onto a [2]-shaped operand.
        let g = reduce_to_shape(&[1.0, 2.0, 3.0, 4.0], &[2]);
        assert_eq!(g, vec![4.0, 6.0]);
    }

    #[test]
    fn logsumexp_handles_neg_inf_slices() {
        let a = TensorData::new(vec![2, 2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0]);
        let r = logsumexp_axis(&a, 1);
        assert_eq!(r.data()[0], f64::NEG_INFINITY);
        assert!((r.data()[1] - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matmul_and_transpose() {
        let a = TensorData::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = TensorData::new(vec![3, 1], vec![1.0, 0.0, -1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[-2.0, -2.0]);
        let t = transpose(&a);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gather0_selects_rows() {
        let a = TensorData::new(vec![3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let g = gather0(&a, &[2, 0, 2]);
        assert_eq!(g.shape(), &[3, 2]);
        assert_eq!(g.data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus_scalar(0.0) - 2.0_f64.ln()).abs() < 1e-15);
        assert!((softplus_scalar(800.0) - 800.0).abs() < 1e-12);
        // exp(-700) is still representable; exp(-800) underflows to zero.
        assert!(softplus_scalar(-700.0) > 0.0);
        assert!(softplus_scalar(-700.0) < 1e-300);
        assert_eq!(softplus_scalar(-800.0), 0.0);
    }
}
