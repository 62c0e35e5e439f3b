//! Dense contiguous row-major tensors.

use std::fmt;

use rand::RngExt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) block sizes.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::validation(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Like [`Tensor::new`] but panics on a length mismatch; for internal call sites whose
    /// lengths are correct by construction.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(numel(shape), data.len(), "shape {shape:?} vs len {}", data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Self {
        Self::from_vec(shape, values.iter().map(|&v| T::cast(v)).collect())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Self {
        Self::from_fn(shape, |_| T::cast(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Compensated sum accumulated in `f64`.
    pub fn sum(&self) -> T {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for v in &self.data {
            let x = v.as_f64();
            let t = s + x;
            c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
            s = t;
        }
        T::cast(s + c)
    }

    /// Two-pass mean in `f64`: the first estimate is corrected by the mean residual, which
    /// makes the mean of a constant tensor exact.
    pub fn mean(&self) -> T {
        let n = self.data.len() as f64;
        let m0 = self.sum().as_f64() / n;
        let r = self.data.iter().map(|v| v.as_f64() - m0).sum::<f64>() / n;
        T::cast(m0 + r)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts between scalar types.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::cast(v.as_f64())).collect() }
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut o = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of size {d}");
            o = o * d + ix;
        }
        o
    }

    /// General axis permutation; `axes[i]` names the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Self {
        assert_eq!(axes.len(), self.shape.len(), "permute rank");
        let src_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mapped: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let n = self.data.len();
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return Tensor { shape: out_shape, data: out };
        }
        let rank = out_shape.len();
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..n {
            out.push(self.data[src]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += mapped[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= mapped[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Tensor { shape: out_shape, data: out }
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        let (outer, n, inner) = split_axis(&self.shape, axis);
        assert!(start + len <= n, "narrow out of range");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor { shape, data }
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        for p in parts {
            assert_eq!(p.dims(), first.len(), "concat rank");
            for (i, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch on axis {i}");
            }
        }
        let (outer, _, inner) = split_axis(first, axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Tensor { shape, data }
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Self {
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let row = &self.data[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Tensor { shape, data }
    }

    /// Broadcasts to `shape` (numpy rules with leading axes added as needed).
    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        let padded = pad_shape(&self.shape, shape.len());
        for (&s, &t) in padded.iter().zip(shape) {
            assert!(s == t || s == 1, "cannot broadcast {:?} to {shape:?}", self.shape);
        }
        let src_strides = strides(&padded);
        let eff: Vec<usize> = padded.iter().zip(&src_strides).map(|(&s, &st)| if s == 1 { 0 } else { st }).collect();
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        if n == 0 {
            return Tensor { shape: shape.to_vec(), data };
        }
        // The maximal trailing group of axes that is either entirely copied or entirely repeated
        // is handled as one run; the odometer only walks the axes in front of it.
        let rank = shape.len();
        let repeated = |ax: usize| padded[ax] == 1 && shape[ax] != 1;
        let tail_kind = repeated(rank - 1);
        let mut split = rank;
        while split > 0 && (shape[split - 1] == 1 || repeated(split - 1) == tail_kind) {
            split -= 1;
        }
        let run: usize = shape[split..].iter().product();
        let outer: usize = shape[..split].iter().product();
        let mut idx = vec![0usize; split];
        let mut src = 0usize;
        for _ in 0..outer {
            if tail_kind {
                data.extend(std::iter::repeat_n(self.data[src], run));
            } else {
                data.extend_from_slice(&self.data[src..src + run]);
            }
            for ax in (0..split).rev() {
                idx[ax] += 1;
                src += eff[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                src -= eff[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        Tensor { shape: shape.to_vec(), data }
    }

    /// Adjoint of [`Tensor::broadcast_to`]: sums a broadcast tensor back to `shape`.
    pub fn reduce_to(&self, shape: &[usize]) -> Self {
        let padded = pad_shape(shape, self.shape.len());
        let mut acc = self.clone();
        for (ax, (&s, &t)) in padded.iter().zip(self.shape.clone().iter()).enumerate() {
            if s == 1 && t != 1 {
                acc = acc.sum_axis(ax);
            }
        }
        acc.reshape(shape)
    }
}

fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    assert!(shape.len() <= rank, "broadcast rank");
    let mut p = vec![1; rank - shape.len()];
    p.extend_from_slice(shape);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_arithmetic() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), t.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn broadcast_then_reduce_scales_by_copies() {
        let t = Tensor::<f64>::from_f64(&[3, 1], &[1.0, 2.0, 3.0]);
        let b = t.broadcast_to(&[2, 3, 4]);
        assert_eq!(b.at(&[1, 2, 3]), 3.0);
        let r = b.reduce_to(&[3, 1]);
        assert_eq!(r.data(), &[8.0, 16.0, 24.0]);
    }

    #[test]
    fn broadcast_matches_index_arithmetic() {
        let cases: [(&[usize], &[usize]); 7] = [
            (&[3, 1], &[2, 3, 4]),
            (&[1, 4], &[3, 4]),
            (&[2, 1, 3], &[2, 5, 3]),
            (&[1, 2, 1, 3], &[4, 2, 5, 3]),
            (&[2, 1, 1], &[2, 3, 4]),
            (&[5], &[2, 5]),
            (&[1, 1], &[1, 1]),
        ];
        for (from, to) in cases {
            let t = Tensor::<f64>::from_fn(from, |i| i as f64);
            let b = t.broadcast_to(to);
            let pad = to.len() - from.len();
            let ts = strides(to);
            for (flat, &v) in b.data().iter().enumerate() {
                let src: Vec<usize> = (0..from.len())
                    .map(|ax| if from[ax] == 1 { 0 } else { flat / ts[ax + pad] % to[ax + pad] })
                    .collect();
                assert_eq!(v, t.at(&src), "{from:?} -> {to:?} at {flat}");
            }
        }
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let t = Tensor::<f32>::from_fn(&[2, 5, 3], |i| i as f32);
        let a = t.narrow(1, 0, 2);
        let b = t.narrow(1, 2, 3);
        assert_eq!(Tensor::concat(&[&a, &b], 1), t);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
