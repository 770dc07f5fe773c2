//! Dense row-major tensors.
//!
//! A tensor is a shape plus a flat buffer; rank is the shape length and the
//! last axis varies fastest. There is no general broadcasting: binary ops
//! accept equal shapes, a scalar (rank-1, extent-1) right-hand side, or a
//! per-channel vector (rank-1 extent C against an N x C x H x W left-hand
//! side). Every operation is pure; inputs are never mutated.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Axis index newtype, to keep axis arguments from mixing with extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axis(pub usize);

/// Binary elementwise modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwMode {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

/// Reduction modes for [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Max value plus the index of its first occurrence (ties break to the
    /// lowest index).
    MaxWithArgmax,
}

/// Result of a reduction: values, plus argmax indices when requested.
/// For a full reduction the index is flat; for an axis reduction it is the
/// position along the reduced axis.
#[derive(Debug, Clone)]
pub struct Reduced<E: Scalar> {
    pub values: Tensor<E>,
    pub indices: Option<Vec<usize>>,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let head: Vec<String> = self.data.iter().take(8).map(|v| format!("{v}")).collect();
        let ellipsis = if self.data.len() > 8 { ", .." } else { "" };
        write!(
            f,
            "Tensor{{shape: {:?}, data: [{}{}]}}",
            self.shape,
            head.join(", "),
            ellipsis
        )
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::InvalidShape {
                op,
                shape: shape.to_vec(),
                reason: "every extent must be at least 1".into(),
            });
        }
        n = n.checked_mul(e).ok_or_else(|| Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "element count overflows".into(),
        })?;
    }
    Ok(n)
}

impl<E: Scalar> Tensor<E> {
    /// Builds a tensor, validating that the shape is non-empty, extents are
    /// all nonzero, and the buffer length matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n = check_shape("tensor::new", &shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor::new",
                shape,
                reason: format!("shape product {} != data length {}", n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal fast path; callers guarantee the invariant.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(!shape.is_empty());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = check_shape("tensor::zeros", &shape)?;
        Ok(Tensor {
            shape,
            data: vec![E::ZERO; n],
        })
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, E::ONE)
    }

    pub fn full(shape: Vec<usize>, value: E) -> Result<Self> {
        let n = check_shape("tensor::full", &shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    /// Rank-1, extent-1 tensor. The kit's scalar convention.
    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Fills from the given generator, drawing uniformly in [lo, hi).
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut SplitMix64) -> Result<Self> {
        let n = check_shape("tensor::uniform", &shape)?;
        let data = (0..n).map(|_| E::from_f64(rng.uniform_in(lo, hi))).collect();
        Ok(Tensor { shape, data })
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
        false // extents are always >= 1
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// True when this is the kit's scalar form (rank 1, extent 1).
    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    /// The single value of a scalar tensor.
    pub fn scalar_value(&self) -> Result<E> {
        if !self.is_scalar() {
            return Err(Error::InvalidShape {
                op: "tensor::scalar_value",
                shape: self.shape.clone(),
                reason: "expected shape [1]".into(),
            });
        }
        Ok(self.data[0])
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// Multi-index accessor, mostly for tests and small bookkeeping.
    pub fn get(&self, idx: &[usize]) -> E {
        assert_eq!(idx.len(), self.rank(), "index rank mismatch");
        let strides = self.strides();
        let mut flat = 0;
        for (i, &k) in idx.iter().enumerate() {
            assert!(k < self.shape[i], "index out of bounds");
            flat += k * strides[i];
        }
        self.data[flat]
    }

    /// Elementwise combine with the broadcast rules described in the module
    /// docs. Output shape always equals `self.shape`.
    pub fn elementwise(&self, rhs: &Tensor<E>, mode: EwMode) -> Result<Tensor<E>> {
        enum Bcast {
            Same,
            Scalar,
            Channel { chw: usize, hw: usize },
        }
        let bcast = if rhs.shape == self.shape {
            Bcast::Same
        } else if rhs.is_scalar() {
            Bcast::Scalar
        } else if rhs.rank() == 1 && self.rank() == 4 && rhs.len() == self.shape[1] {
            let hw = self.shape[2] * self.shape[3];
            Bcast::Channel {
                chw: self.shape[1] * hw,
                hw,
            }
        } else {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        };

        let combine = |a: E, b: E, i: usize| -> Result<E> {
            Ok(match mode {
                EwMode::Add => a + b,
                EwMode::Sub => a - b,
                EwMode::Mul => a * b,
                EwMode::Div => {
                    if b == E::ZERO {
                        return Err(Error::DivisionByZero { index: i });
                    }
                    a / b
                }
                EwMode::Max => a.maximum(b),
            })
        };

        let mut out = Vec::with_capacity(self.data.len());
        match bcast {
            Bcast::Same => {
                for (i, (&a, &b)) in self.data.iter().zip(rhs.data.iter()).enumerate() {
                    out.push(combine(a, b, i)?);
                }
            }
            Bcast::Scalar => {
                let b = rhs.data[0];
                for (i, &a) in self.data.iter().enumerate() {
                    out.push(combine(a, b, i)?);
                }
            }
            Bcast::Channel { chw, hw } => {
                for (i, &a) in self.data.iter().enumerate() {
                    let c = (i % chw) / hw;
                    out.push(combine(a, rhs.data[c], i)?);
                }
            }
        }
        Ok(Tensor::from_raw(self.shape.clone(), out))
    }

    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(rhs, EwMode::Add)
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(rhs, EwMode::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(rhs, EwMode::Mul)
    }

    pub fn div(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(rhs, EwMode::Div)
    }

    /// Multiplies every element by a scalar.
    pub fn scale(&self, k: E) -> Tensor<E> {
        self.map(|v| v * k)
    }

    pub(crate) fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Rank-2 matrix product; inner dimensions must agree.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![E::ZERO; m * n];
        // accumulate row by row in ascending k so the reduction order is fixed
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let acc = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in row.iter().enumerate() {
                let brow = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in acc.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    /// Concatenates along `axis`; all other extents must match.
    pub fn concat(parts: &[&Tensor<E>], axis: Axis) -> Result<Tensor<E>> {
        let first = *parts.first().ok_or(Error::EmptyConcat)?;
        let rank = first.rank();
        if axis.0 >= rank {
            return Err(Error::InvalidAxis {
                axis: axis.0,
                rank,
            });
        }
        let mut cat_extent = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            for d in 0..rank {
                if d != axis.0 && p.shape[d] != first.shape[d] {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape.clone(),
                        rhs: p.shape.clone(),
                    });
                }
            }
            cat_extent += p.shape[axis.0];
        }
        let mut shape = first.shape.clone();
        shape[axis.0] = cat_extent;

        let outer: usize = first.shape[..axis.0].iter().product();
        let inner: usize = first.shape[axis.0 + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * cat_extent * inner);
        for o in 0..outer {
            for p in parts {
                let pa = p.shape[axis.0];
                let start = o * pa * inner;
                data.extend_from_slice(&p.data[start..start + pa * inner]);
            }
        }
        Ok(Tensor::from_raw(shape, data))
    }

    /// Takes `len` extents along `axis` starting at `start`.
    pub fn slice(&self, axis: Axis, start: usize, len: usize) -> Result<Tensor<E>> {
        if axis.0 >= self.rank() {
            return Err(Error::InvalidAxis {
                axis: axis.0,
                rank: self.rank(),
            });
        }
        let extent = self.shape[axis.0];
        if len == 0 || start + len > extent {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: self.shape.clone(),
                reason: format!("range {start}..{} exceeds extent {extent}", start + len),
            });
        }
        let outer: usize = self.shape[..axis.0].iter().product();
        let inner: usize = self.shape[axis.0 + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis.0] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Tensor::from_raw(shape, data))
    }

    /// Same elements, new shape; products must agree.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<E>> {
        let n = check_shape("reshape", &shape)?;
        if n != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("shape product {} != element count {}", n, self.data.len()),
            });
        }
        Ok(Tensor::from_raw(shape, self.data.clone()))
    }

    /// Reduces every element, or one axis when given. Axis reduction removes
    /// that axis; a full reduction (and a rank-1 axis reduction) yields the
    /// scalar shape [1].
    pub fn reduce(&self, axis: Option<Axis>, mode: Reduce) -> Result<Reduced<E>> {
        match axis {
            None => {
                let mut best = self.data[0];
                let mut best_i = 0usize;
                let mut sum = E::ZERO;
                for (i, &v) in self.data.iter().enumerate() {
                    sum += v;
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                let (value, idx) = match mode {
                    Reduce::Sum => (sum, None),
                    Reduce::Mean => (sum / E::from_f64(self.data.len() as f64), None),
                    Reduce::MaxWithArgmax => (best, Some(vec![best_i])),
                };
                Ok(Reduced {
                    values: Tensor::scalar(value),
                    indices: idx,
                })
            }
            Some(Axis(a)) => {
                if a >= self.rank() {
                    return Err(Error::InvalidAxis {
                        axis: a,
                        rank: self.rank(),
                    });
                }
                let outer: usize = self.shape[..a].iter().product();
                let alen = self.shape[a];
                let inner: usize = self.shape[a + 1..].iter().product();
                let mut values = Vec::with_capacity(outer * inner);
                let mut indices = Vec::new();
                for o in 0..outer {
                    for i in 0..inner {
                        let mut sum = E::ZERO;
                        let mut best = self.data[o * alen * inner + i];
                        let mut best_k = 0usize;
                        for k in 0..alen {
                            let v = self.data[(o * alen + k) * inner + i];
                            sum += v;
                            if v > best {
                                best = v;
                                best_k = k;
                            }
                        }
                        match mode {
                            Reduce::Sum => values.push(sum),
                            Reduce::Mean => values.push(sum / E::from_f64(alen as f64)),
                            Reduce::MaxWithArgmax => {
                                values.push(best);
                                indices.push(best_k);
                            }
                        }
                    }
                }
                let mut shape: Vec<usize> = self
                    .shape
                    .iter()
                    .enumerate()
                    .filter(|&(d, _)| d != a)
                    .map(|(_, &e)| e)
                    .collect();
                if shape.is_empty() {
                    shape = vec![1];
                }
                Ok(Reduced {
                    values: Tensor::from_raw(shape, values),
                    indices: if matches!(mode, Reduce::MaxWithArgmax) {
                        Some(indices)
                    } else {
                        None
                    },
                })
            }
        }
    }

    /// Sum of all elements, as a plain scalar.
    pub fn sum_all(&self) -> E {
        let mut s = E::ZERO;
        for &v in &self.data {
            s += v;
        }
        s
    }

    pub fn mean_all(&self) -> E {
        self.sum_all() / E::from_f64(self.data.len() as f64)
    }

    /// Errors with the first offending element index if any value is NaN or
    /// infinite.
    pub fn ensure_finite(&self) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element type conversion via f64.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        )
    }

    /// Largest absolute elementwise difference, in f64. Shapes must match;
    /// handy for tolerance checks in tests.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn add_shifts_every_element() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let half = Tensor::full(vec![2, 2], 0.5f32).unwrap();
        let y = x.add(&half).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 3.5, 4.5]);
        // purity: x unchanged
        assert_eq!(x.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn mul_by_ones_is_bit_identical() {
        let x = t(&[3], &[0.1, -2.5, 7.25]);
        let ones = Tensor::ones(vec![3]).unwrap();
        let y = x.mul(&ones).unwrap();
        assert_eq!(
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn scalar_broadcast_applies_to_all() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let two = Tensor::scalar(2.0f32);
        assert_eq!(x.mul(&two).unwrap().data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    // Oracle: explicit four-deep nested loop for the per-channel broadcast.
    #[test]
    fn per_channel_add_matches_nested_loop_oracle() {
        let (n, c, h, w) = (2, 3, 4, 5);
        let mut rng = SplitMix64::new(17);
        let x = Tensor::<f32>::uniform(vec![n, c, h, w], -1.0, 1.0, &mut rng).unwrap();
        let bias = Tensor::<f32>::new(vec![c], vec![0.5, -1.5, 2.0]).unwrap();

        let got = x.add(&bias).unwrap();

        let mut want = vec![0.0f32; n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let i = ((ni * c + ci) * h + hi) * w + wi;
                        want[i] = x.data()[i] + bias.data()[ci];
                    }
                }
            }
        }
        assert_eq!(got.data(), &want[..]);
    }

    #[test]
    fn div_by_zero_reports_element_index() {
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let d = t(&[4], &[1.0, 1.0, 0.0, 1.0]);
        match x.div(&d) {
            Err(Error::DivisionByZero { index }) => assert_eq!(index, 2),
            other => panic!("expected DivisionByZero, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_shapes_error() {
        let x = t(&[2, 2], &[1.0; 4]);
        let y = t(&[3], &[1.0; 3]);
        assert!(matches!(
            x.add(&y),
            Err(Error::ShapeMismatch { op: "elementwise", .. })
        ));
    }

    #[test]
    fn max_mode_takes_elementwise_maximum() {
        let x = t(&[3], &[1.0, -2.0, 5.0]);
        let y = t(&[3], &[0.0, 3.0, 4.0]);
        assert_eq!(x.elementwise(&y, EwMode::Max).unwrap().data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn matmul_identity_preserves() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(x.matmul(&eye).unwrap().data(), x.data());
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2,3],[4,5,6]] x [[7,8],[9,10],[11,12]] = [[58,64],[139,154]]
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    // Oracle: brute-force triple loop.
    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SplitMix64::new(3);
        let a = Tensor::<f64>::uniform(vec![4, 5], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::uniform(vec![5, 6], -1.0, 1.0, &mut rng).unwrap();
        let got = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let mut want = 0.0f64;
                for k in 0..5 {
                    want += a.get(&[i, k]) * b.get(&[k, j]);
                }
                assert!((got.get(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn concat_stacks_along_axis() {
        let a = t(&[1, 2, 2, 2], &[1.0; 8]);
        let b = t(&[1, 3, 2, 2], &[2.0; 12]);
        let cat = Tensor::concat(&[&a, &b], Axis(1)).unwrap();
        assert_eq!(cat.shape(), &[1, 5, 2, 2]);
        assert_eq!(&cat.data()[..8], &[1.0; 8]);
        assert_eq!(&cat.data()[8..], &[2.0; 12]);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut rng = SplitMix64::new(9);
        let a = Tensor::<f32>::uniform(vec![2, 3, 2], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::<f32>::uniform(vec![2, 5, 2], -1.0, 1.0, &mut rng).unwrap();
        let cat = Tensor::concat(&[&a, &b], Axis(1)).unwrap();
        assert_eq!(cat.slice(Axis(1), 0, 3).unwrap(), a);
        assert_eq!(cat.slice(Axis(1), 3, 5).unwrap(), b);
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let a = t(&[2, 2], &[0.0; 4]);
        let b = t(&[3, 3], &[0.0; 9]);
        assert!(Tensor::concat(&[&a, &b], Axis(0)).is_err());
        assert!(Tensor::<f32>::concat(&[], Axis(0)).is_err());
    }

    #[test]
    fn reduce_sum_of_ones_counts_elements() {
        let x = Tensor::<f32>::ones(vec![3, 3]).unwrap();
        let r = x.reduce(None, Reduce::Sum).unwrap();
        assert_eq!(r.values.scalar_value().unwrap(), 9.0);
    }

    #[test]
    fn reduce_mean() {
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            x.reduce(None, Reduce::Mean).unwrap().values.scalar_value().unwrap(),
            2.5
        );
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_flat_index() {
        let x = t(&[3], &[5.0, 1.0, 5.0]);
        let r = x.reduce(None, Reduce::MaxWithArgmax).unwrap();
        assert_eq!(r.values.scalar_value().unwrap(), 5.0);
        assert_eq!(r.indices.unwrap(), vec![0]);
    }

    #[test]
    fn axis_reduce_removes_the_axis() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = x.reduce(Some(Axis(1)), Reduce::Sum).unwrap();
        assert_eq!(r.values.shape(), &[2]);
        assert_eq!(r.values.data(), &[6.0, 15.0]);

        let m = x.reduce(Some(Axis(0)), Reduce::MaxWithArgmax).unwrap();
        assert_eq!(m.values.data(), &[4.0, 5.0, 6.0]);
        assert_eq!(m.indices.unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn axis_reduce_of_rank1_yields_scalar_shape() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let r = x.reduce(Some(Axis(0)), Reduce::Sum).unwrap();
        assert_eq!(r.values.shape(), &[1]);
        assert_eq!(r.values.data(), &[6.0]);
    }

    #[test]
    fn reshape_round_trip() {
        let x = t(&[2, 6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        let y = x.reshape(vec![3, 4]).unwrap().reshape(vec![2, 6]).unwrap();
        assert_eq!(x, y);
        assert!(x.reshape(vec![5]).is_err());
    }

    #[test]
    fn ensure_finite_flags_first_offender() {
        let x = t(&[3], &[1.0, f32::NAN, f32::INFINITY]);
        match x.ensure_finite() {
            Err(Error::NonFinite { index }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert!(t(&[2], &[1.0, 2.0]).ensure_finite().is_ok());
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let x = t(&[3], &[0.5, -1.25, 3.0]);
        let y: Tensor<f32> = x.cast::<f64>().cast::<f32>();
        assert_eq!(x, y);
    }

    #[test]
    fn slice_bounds_are_checked() {
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(x.slice(Axis(0), 2, 3).is_err());
        assert!(x.slice(Axis(1), 0, 1).is_err());
        assert_eq!(x.slice(Axis(0), 1, 2).unwrap().data(), &[2.0, 3.0]);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn small_tensor() -> impl Strategy<Value = Tensor<f32>> {
        (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(a, b, c)| {
            proptest::collection::vec(-10.0f32..10.0, a * b * c)
                .prop_map(move |data| Tensor::new(vec![a, b, c], data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn reshape_round_trip_preserves(t in small_tensor()) {
            let n = t.len();
            let flat = t.reshape(vec![n]).unwrap();
            let back = flat.reshape(t.shape().to_vec()).unwrap();
            prop_assert_eq!(t, back);
        }

        #[test]
        fn add_commutes_bitwise(t in small_tensor(), u in small_tensor()) {
            if t.shape() == u.shape() {
                let a = t.add(&u).unwrap();
                let b = u.add(&t).unwrap();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn slices_of_concat_recover(axis in 0usize..3, t in small_tensor(), u in small_tensor()) {
            // make the shapes agree off-axis
            let mut shape_ok = true;
            for d in 0..3 {
                if d != axis && t.shape()[d] != u.shape()[d] {
                    shape_ok = false;
                }
            }
            if shape_ok {
                let cat = Tensor::concat(&[&t, &u], Axis(axis)).unwrap();
                prop_assert_eq!(cat.slice(Axis(axis), 0, t.shape()[axis]).unwrap(), t.clone());
                prop_assert_eq!(
                    cat.slice(Axis(axis), t.shape()[axis], u.shape()[axis]).unwrap(),
                    u.clone()
                );
            }
        }

        #[test]
        fn full_reduce_max_agrees_with_iterator(t in small_tensor()) {
            let r = t.reduce(None, Reduce::MaxWithArgmax).unwrap();
            let want = t.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert_eq!(r.values.scalar_value().unwrap(), want);
        }
    }
}
