//! Dense row-major tensors and the forward kernels of every primitive.
//!
//! Kernels here are pure: inputs are borrowed, results are freshly allocated.
//! The differentiation graph in [`crate::graph`] wraps them and adds the
//! backward rules.
//!
//! Video activations use a time-major, channel-last layout `[t, s, c]`
//! where `s` enumerates spatial sites (`h * w`). Temporal kernels therefore
//! walk the leading axis and spatial pooling reduces the middle one.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Error, Result};
use crate::real::Real;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(shape_err("tensor", &shape, &[]));
        }
        if numel_of(&shape) != data.len() {
            return Err(shape_err("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![T::zero()] } else { data };
        Self {
            shape: vec![n],
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "extents must be positive"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel_of(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    // ---------------------------------------------------------------------
    // elementwise

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast("sub", rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast("mul", rhs, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    fn zip_broadcast(
        &self,
        op: &'static str,
        rhs: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        match broadcast_kind(&self.shape, &rhs.shape) {
            Some(Broadcast::Same) => Ok(Tensor {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .zip(&rhs.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            }),
            Some(Broadcast::Rhs) => {
                let row = rhs.numel();
                let data = self
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| f(a, rhs.data[i % row]))
                    .collect();
                Ok(Tensor {
                    shape: self.shape.clone(),
                    data,
                })
            }
            Some(Broadcast::Lhs) => {
                let row = self.numel();
                let data = rhs
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| f(self.data[i % row], b))
                    .collect();
                Ok(Tensor {
                    shape: rhs.shape.clone(),
                    data,
                })
            }
            None => Err(shape_err(op, &self.shape, &rhs.shape)),
        }
    }

    pub fn gelu(&self) -> Tensor<T> {
        self.map(gelu)
    }

    pub fn softplus(&self) -> Tensor<T> {
        self.map(softplus)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map(sigmoid)
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// `[m, k] x [k, n]`, or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, m, k, n) = matmul_dims(&self.shape, &rhs.shape)?;
        let mut out = vec![T::zero(); batch * m * n];
        for b in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &self.data[b * m * k..],
                (k, 1),
                &rhs.data[b * k * n..],
                (n, 1),
                &mut out[b * m * n..],
                false,
            );
        }
        let shape = if self.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(Tensor { shape, data: out })
    }

    // ---------------------------------------------------------------------
    // normalisation

    /// Normalises over the last axis, then applies `gamma` and `beta`
    /// (both of the last axis' length). Returns the output plus the per-row
    /// inverse standard deviation used by the backward rule.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let d = *self.shape.last().unwrap();
        if gamma.numel() != d || beta.numel() != d {
            return Err(shape_err("layer_norm", &self.shape, &gamma.shape));
        }
        let rows = self.numel() / d;
        let eps = T::lit(LN_EPS);
        let inv_d = T::one() / T::lit(d as f64);
        let mut out = vec![T::zero(); self.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &self.data[r * d..(r + 1) * d];
            let mean = x.iter().copied().sum::<T>() * inv_d;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                o[j] = (x[j] - mean) * is * gamma.data[j] + beta.data[j];
            }
        }
        Ok((
            Tensor {
                shape: self.shape.clone(),
                data: out,
            },
            inv_std,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor<T> {
        let d = *self.shape.last().unwrap();
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = T::one() / s;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    // ---------------------------------------------------------------------
    // layout

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) || numel_of(shape) != self.numel() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// General axis permutation; `out.shape[i] = self.shape[axes[i]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || core::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &self.shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        // stride in the input for each output axis
        let st: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; r];
        let inner = out_shape[r - 1];
        let inner_st = st[r - 1];
        let outer = self.numel() / inner;
        for _ in 0..outer {
            let base: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
            for j in 0..inner {
                out.push(self.data[base + j * inner_st]);
            }
            // increment all but the innermost index
            for ax in (0..r - 1).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(shape_err("transpose", &self.shape, &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| config_err("concat of zero tensors"))?;
        let r = first.rank();
        if axis >= r {
            return Err(shape_err("concat", &first.shape, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let ok = p.rank() == r
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first.shape, &p.shape));
            }
            total += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start >= end || end > self.shape[axis] {
            return Err(shape_err("slice", &self.shape, &[axis, start, end]));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Tensor { shape, data })
    }

    // ---------------------------------------------------------------------
    // temporal / spatial

    /// Mean over the spatial axis of a `[t, s, c]` tensor.
    pub fn spatial_avg_pool(&self) -> Result<Tensor<T>> {
        let (t, s, c) = dims3("spatial_avg_pool", &self.shape)?;
        let inv = T::one() / T::lit(s as f64);
        let mut out = vec![T::zero(); t * c];
        for ti in 0..t {
            let o = &mut out[ti * c..(ti + 1) * c];
            for si in 0..s {
                let x = &self.data[(ti * s + si) * c..(ti * s + si + 1) * c];
                for (a, &b) in o.iter_mut().zip(x) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a *= inv;
            }
        }
        Ok(Tensor {
            shape: vec![t, c],
            data: out,
        })
    }
}

// -------------------------------------------------------------------------
// depth-wise temporal convolution

/// Geometry of a depth-wise temporal convolution.
///
/// `block` splits the time axis into independent blocks (snippets); zero
/// padding is applied at every block edge. `stride` subsamples the output
/// within each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub block: Option<usize>,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            block: None,
        }
    }
}

impl ConvGeometry {
    pub(crate) fn out_len(&self, t: usize) -> usize {
        let b = self.block.unwrap_or(t);
        (t / b) * b.div_ceil(self.stride)
    }

    /// For each output step: the centre input index and the block bounds.
    pub(crate) fn taps(&self, t: usize) -> Vec<(usize, usize, usize)> {
        let b = self.block.unwrap_or(t);
        let per = b.div_ceil(self.stride);
        let mut v = Vec::with_capacity(self.out_len(t));
        for blk in 0..t / b {
            for j in 0..per {
                v.push((blk * b + j * self.stride, blk * b, blk * b + b));
            }
        }
        v
    }
}

/// `out[τ, s, c] = bias[c] + Σ_j kernel[c, j] · x_pad[τ + j - (k-1)/2, s, c]`.
pub fn dwconv_temporal<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let (t, s, c) = dims3("dwconv_temporal", x.shape())?;
    if kernel.rank() != 2 || kernel.shape()[0] != c || bias.numel() != c {
        return Err(shape_err("dwconv_temporal", x.shape(), kernel.shape()));
    }
    let k = kernel.shape()[1];
    if k % 2 == 0 {
        return Err(config_err(alloc::format!(
            "temporal kernel size must be odd, got {k}"
        )));
    }
    if geo.stride == 0 {
        return Err(config_err("conv stride must be positive"));
    }
    if let Some(b) = geo.block {
        if b == 0 || t % b != 0 {
            return Err(config_err(alloc::format!(
                "block length {b} does not divide {t} steps"
            )));
        }
    }
    let half = (k / 2) as isize;
    let taps = geo.taps(t);
    let plane = s * c;
    let mut out = vec![T::zero(); taps.len() * plane];
    let kd = kernel.data();
    let xd = x.data();
    for (o, &(centre, lo, hi)) in taps.iter().enumerate() {
        let orow = &mut out[o * plane..(o + 1) * plane];
        for si in 0..s {
            orow[si * c..(si + 1) * c].copy_from_slice(bias.data());
        }
        for j in 0..k {
            let src = centre as isize + j as isize - half;
            if src < lo as isize || src >= hi as isize {
                continue;
            }
            let xrow = &xd[src as usize * plane..(src as usize + 1) * plane];
            for si in 0..s {
                let oc = &mut orow[si * c..(si + 1) * c];
                let xc = &xrow[si * c..(si + 1) * c];
                for ch in 0..c {
                    oc[ch] += kd[ch * k + j] * xc[ch];
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![taps.len(), s, c],
        data: out,
    })
}

// -------------------------------------------------------------------------
// temporal resize

/// Interpolation weights of endpoint-aligned linear resizing:
/// output `i` samples position `i * (t - 1) / (target - 1)`; a single
/// output averages every input step.
pub(crate) fn resize_weights(t: usize, target: usize) -> Vec<Vec<(usize, f64)>> {
    if target == 1 {
        let w = 1.0 / t as f64;
        return vec![(0..t).map(|i| (i, w)).collect()];
    }
    if target == t {
        return (0..t).map(|i| vec![(i, 1.0)]).collect();
    }
    (0..target)
        .map(|i| {
            let pos = i as f64 * (t - 1) as f64 / (target - 1) as f64;
            let lo = libm::floor(pos) as usize;
            let lo = lo.min(t - 1);
            let frac = pos - lo as f64;
            if frac == 0.0 || lo + 1 >= t {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - frac), (lo + 1, frac)]
            }
        })
        .collect()
}

/// Resizes the leading (time) axis of a `[t, c]` tensor.
pub fn temporal_resize<T: Real>(x: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    if target == 0 {
        return Err(config_err("temporal_resize target length must be positive"));
    }
    if x.rank() != 2 {
        return Err(shape_err("temporal_resize", x.shape(), &[target]));
    }
    let (t, c) = (x.shape()[0], x.shape()[1]);
    if target == t {
        return Ok(x.clone());
    }
    let mut out = vec![T::zero(); target * c];
    for (i, taps) in resize_weights(t, target).iter().enumerate() {
        let o = &mut out[i * c..(i + 1) * c];
        for &(src, w) in taps {
            let w = T::lit(w);
            for (a, &b) in o.iter_mut().zip(&x.data()[src * c..(src + 1) * c]) {
                *a += w * b;
            }
        }
    }
    Ok(Tensor {
        shape: vec![target, c],
        data: out,
    })
}

// -------------------------------------------------------------------------
// scalar functions

const INV_SQRT2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x · Φ(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(INV_SQRT2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(INV_SQRT2)).erf());
    let pdf = T::lit(INV_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else if x < T::lit(-30.0) {
        x.exp()
    } else {
        x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
    }
}

// -------------------------------------------------------------------------
// shape helpers

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// right operand has leading extent 1 and is repeated over rows
    Rhs,
    Lhs,
}

fn leading_one_matches(small: &[usize], big: &[usize]) -> bool {
    (small.len() == big.len() && small[0] == 1 && small[1..] == big[1..])
        || (small.len() + 1 == big.len() && small == &big[1..])
}

pub(crate) fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::Same)
    } else if leading_one_matches(b, a) {
        Some(Broadcast::Rhs)
    } else if leading_one_matches(a, b) {
        Some(Broadcast::Lhs)
    } else {
        None
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n)),
        _ => Err(shape_err("matmul", a, b)),
    }
}

pub(crate) fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [t, s, c] => Ok((*t, *s, *c)),
        [t, c] => Ok((*t, 1, *c)),
        _ => Err(shape_err(op, shape, &[])),
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn gelu_fixed_point_at_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(gelu(0.0f32), 0.0);
    }

    #[test]
    fn matmul_identity_rows_select() {
        let a = t(&[2, 3], &[1., 0., 0., 0., 1., 0.]);
        let x = t(&[3, 1], &[1., 2., 3.]);
        assert_eq!(a.matmul(&x).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn matmul_inner_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = t(&[3], &[0., 0., 0.]).softmax();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn add_broadcasts_leading_one_only() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[1, 2], &[10., 20.]);
        assert_eq!(a.add(&b).unwrap().data(), &[11., 22., 13., 24.]);
        let bad = t(&[2, 1], &[1., 1.]);
        assert!(a.add(&bad).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // element (a,b,c) of x lands at (c,a,b)
        assert_eq!(p.data()[3 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 2], |i| 100.0 + i as f64);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.slice(1, 0, 3).unwrap(), a);
        assert_eq!(c.slice(1, 3, 5).unwrap(), b);
    }

    #[test]
    fn dwconv_identity_kernel() {
        let x = t(&[3, 1], &[1., 2., 3.]);
        let k = t(&[1, 3], &[0., 1., 0.]);
        let b = t(&[1], &[0.]);
        let y = dwconv_temporal(&x, &k, &b, ConvGeometry::default()).unwrap();
        assert_eq!(y.data(), &[1., 2., 3.]);
    }

    #[test]
    fn dwconv_box_kernel_matches_direct_sum() {
        // oracle: zero-padded direct sum
        let xs = [1.0, 2.0, 3.0];
        let padded = [0.0, 1.0, 2.0, 3.0, 0.0];
        let expect: Vec<f64> = (0..3).map(|i| padded[i] + padded[i + 1] + padded[i + 2]).collect();
        assert_eq!(expect, vec![3.0, 6.0, 5.0]);
        let x = t(&[3, 1], &xs);
        let k = t(&[1, 3], &[1., 1., 1.]);
        let b = t(&[1], &[0.]);
        let y = dwconv_temporal(&x, &k, &b, ConvGeometry::default()).unwrap();
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn dwconv_zero_kernel_gives_bias() {
        let x = Tensor::<f64>::from_fn(&[5, 2, 3], |i| (i as f64).sin());
        let k = Tensor::zeros(&[3, 3]);
        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let y = dwconv_temporal(&x, &k, &b, ConvGeometry::default()).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[i % 3]);
        }
    }

    #[test]
    fn dwconv_rejects_even_kernel_and_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[4, 1, 2]);
        let even = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            dwconv_temporal(&x, &even, &Tensor::zeros(&[2]), ConvGeometry::default()),
            Err(Error::Config(_))
        ));
        let wrong = Tensor::zeros(&[3, 3]);
        assert!(matches!(
            dwconv_temporal(&x, &wrong, &Tensor::zeros(&[3]), ConvGeometry::default()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn dwconv_stride_and_blocks() {
        let x = Tensor::<f64>::from_fn(&[8, 1], |i| i as f64 + 1.0);
        let k = t(&[1, 3], &[1., 1., 1.]);
        let b = t(&[1], &[0.]);
        let y = dwconv_temporal(&x, &k, &b, ConvGeometry { stride: 2, block: None }).unwrap();
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert_eq!(y.data(), &[3., 9., 15., 21.]);
        let y = dwconv_temporal(&x, &k, &b, ConvGeometry { stride: 1, block: Some(4) }).unwrap();
        // blocks [1,2,3,4] and [5,6,7,8] padded independently
        assert_eq!(y.data(), &[3., 6., 9., 7., 11., 18., 21., 15.]);
    }

    #[test]
    fn spatial_pool_examples() {
        let x = t(&[1, 4, 1], &[1., 3., 5., 7.]);
        assert_eq!(x.spatial_avg_pool().unwrap().data(), &[4.]);
        let c = Tensor::<f64>::full(&[3, 4, 2], 2.5);
        assert!(c.spatial_avg_pool().unwrap().data().iter().all(|&v| v == 2.5));
        let id = Tensor::<f64>::from_fn(&[3, 1, 2], |i| i as f64);
        assert_eq!(id.spatial_avg_pool().unwrap().data(), id.data());
    }

    #[test]
    fn resize_examples() {
        let x = t(&[2, 1], &[1., 3.]);
        let y = temporal_resize(&x, 3).unwrap();
        // closed form: 1 + (3 - 1) * i / 2
        assert_eq!(y.data(), &[1., 2., 3.]);
        let z = Tensor::<f64>::from_fn(&[5, 3], |i| (i as f64).cos());
        assert_eq!(temporal_resize(&z, 5).unwrap(), z);
        let c = Tensor::<f64>::full(&[7, 2], 4.0);
        let r = temporal_resize(&c, 11).unwrap();
        assert!(r.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
        let m = temporal_resize(&t(&[4, 1], &[1., 2., 3., 6.]), 1).unwrap();
        assert_eq!(m.data(), &[3.]);
        assert!(matches!(temporal_resize(&x, 0), Err(Error::Config(_))));
    }

    #[test]
    fn softplus_is_non_negative_and_stable() {
        for &x in &[-1e3f64, -40.0, -1.0, 0.0, 1.0, 40.0, 1e3] {
            let v = softplus(x);
            assert!(v >= 0.0 && v.is_finite());
        }
        assert!((softplus(0.0f64) - core::f64::consts::LN_2).abs() < 1e-15);
    }
}
