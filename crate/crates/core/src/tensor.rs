//! Dense row-major float32 arrays and the raw kernels the tape builds on.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Row-major array. Models use the default `f32`; the `f64` instantiation
/// exists so gradient checks can run the same kernels without rounding noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorOf<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// The single-precision tensor used by models.
pub type Tensor = TensorOf<f32>;

impl<T: Element> TensorOf<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Samples from `Normal(0, std)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut RngState) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.standard_normal() * std))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Samples uniformly from `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngState) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.uniform_range(lo, hi)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", &self.shape, &[]));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise conversion to another precision.
    pub fn cast<U: Element>(&self) -> TensorOf<U> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Size of the last axis; 1 for scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// `c += a · b` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`, all row-major.
pub(crate) fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c, (n as isize, 1));
}

/// `c += aᵀ · b` with `a: [k, m]`, `b: [k, n]`, `c: [m, n]`.
pub(crate) fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n);
    T::gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1), c, (n as isize, 1));
}

/// `c += a · bᵀ` with `a: [m, k]`, `b: [n, k]`, `c: [m, n]`.
pub(crate) fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    T::gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize), c, (n as isize, 1));
}

#[cfg(test)]
/// Transposes a row-major `[rows, cols]` matrix.
pub(crate) fn transpose2d<T: Element>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    const BLOCK: usize = 32;
    for r0 in (0..rows).step_by(BLOCK) {
        for c0 in (0..cols).step_by(BLOCK) {
            for r in r0..(r0 + BLOCK).min(rows) {
                for c in c0..(c0 + BLOCK).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand of a broadcast maps onto the output's linear indices.
#[derive(Debug, Clone)]
pub(crate) enum BroadcastMap {
    /// Same shape as the output.
    Identity,
    /// The operand repeats with period `len` along the flattened output.
    Cyclic(usize),
    /// The operand is broadcast along one contiguous block of axes: output
    /// `[outer, repeat, inner]` reads input `[outer, inner]`.
    Middle { inner: usize, repeat: usize },
    /// Arbitrary broadcast; explicit index per output element.
    Explicit(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        let out_numel: usize = out.iter().product();
        let in_numel: usize = input.iter().product();
        if out_numel == in_numel {
            return BroadcastMap::Identity;
        }
        // Input equal to a trailing block of the output (after dropping leading 1s).
        let trimmed: &[usize] = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            &input[lead..]
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
            return BroadcastMap::Cyclic(in_numel.max(1));
        }
        let rank = out.len();
        let padded: Vec<usize> = core::iter::repeat_n(1, rank - input.len())
            .chain(input.iter().copied())
            .collect();
        let bcast: Vec<bool> = padded.iter().zip(out).map(|(&d, &o)| d == 1 && o != 1).collect();
        if let (Some(first), Some(last)) = (bcast.iter().position(|&b| b), bcast.iter().rposition(|&b| b)) {
            if bcast[first..=last].iter().all(|&b| b) {
                return BroadcastMap::Middle {
                    inner: out[last + 1..].iter().product(),
                    repeat: out[first..=last].iter().product(),
                };
            }
        }
        let in_strides = strides(&padded);
        let eff: Vec<usize> = padded
            .iter()
            .zip(&in_strides)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let mut idx = vec![0usize; rank];
        let mut map = Vec::with_capacity(out_numel);
        let mut offset = 0usize;
        for _ in 0..out_numel {
            map.push(offset);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += eff[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                offset -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        BroadcastMap::Explicit(map)
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Cyclic(n) => i % n,
            BroadcastMap::Middle { inner, repeat } => (i / (inner * repeat)) * inner + i % inner,
            BroadcastMap::Explicit(m) => m[i],
        }
    }

    /// Sums `grad` (output-shaped) down onto the operand.
    pub(crate) fn reduce<T: Element>(&self, grad: &[T], in_numel: usize) -> Vec<T> {
        match self {
            BroadcastMap::Identity => grad.to_vec(),
            BroadcastMap::Cyclic(n) => {
                let mut out = vec![T::ZERO; in_numel];
                for chunk in grad.chunks(*n) {
                    for (o, g) in out.iter_mut().zip(chunk) {
                        *o += *g;
                    }
                }
                out
            }
            BroadcastMap::Middle { inner, repeat } => {
                let mut out = vec![T::ZERO; in_numel];
                for (c, chunk) in grad.chunks(*inner).enumerate() {
                    let dst = &mut out[(c / repeat) * inner..(c / repeat + 1) * inner];
                    for (o, g) in dst.iter_mut().zip(chunk) {
                        *o += *g;
                    }
                }
                out
            }
            BroadcastMap::Explicit(m) => {
                let mut out = vec![T::ZERO; in_numel];
                for (g, &j) in grad.iter().zip(m) {
                    out[j] += *g;
                }
                out
            }
        }
    }
}

/// Permutes axes: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    if rank == 0 || numel == 0 {
        return (data.to_vec(), out_shape);
    }
    // Innermost axis handled as a strided copy.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer_rank = rank - 1;
    let mut idx = vec![0usize; outer_rank];
    let mut base = 0usize;
    let outer: usize = out_shape[..outer_rank].iter().product();
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for ax in (0..outer_rank).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 5]).is_err());
    }

    fn explicit_index(out: &[usize], input: &[usize], i: usize) -> usize {
        let padded: Vec<usize> = core::iter::repeat_n(1, out.len() - input.len())
            .chain(input.iter().copied())
            .collect();
        let (mut rem, mut idx) = (i, 0);
        let in_strides = strides(&padded);
        for ax in (0..out.len()).rev() {
            let c = rem % out[ax];
            rem /= out[ax];
            if padded[ax] != 1 {
                idx += c * in_strides[ax];
            }
        }
        idx
    }

    #[test]
    fn broadcast_maps_match_explicit_indexing() {
        let out = [2, 3, 4, 5];
        let inputs: [&[usize]; 7] = [&[5], &[4, 5], &[2, 1, 4, 5], &[2, 1, 1, 5], &[2, 3, 1, 1], &[3, 1, 5], &[1, 3, 1, 5]];
        for input in inputs {
            let map = BroadcastMap::new(&out, input);
            let numel: usize = input.iter().product();
            for i in 0..120 {
                assert_eq!(map.index(i), explicit_index(&out, input, i), "{input:?} at {i}");
            }
            let grad: Vec<f64> = (0..120).map(|i| i as f64).collect();
            let mut expect = vec![0.0; numel];
            for (i, g) in grad.iter().enumerate() {
                expect[explicit_index(&out, input, i)] += g;
            }
            assert_eq!(map.reduce(&grad, numel), expect);
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let mut rng = RngState::new(3);
        let (m, k, n) = (7, 5, 6);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let mut c1 = vec![0.0; m * n];
        gemm_nn(m, k, n, a.data(), b.data(), &mut c1);
        let at = transpose2d(a.data(), m, k);
        let mut c2 = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, b.data(), &mut c2);
        let bt = transpose2d(b.data(), k, n);
        let mut c3 = vec![0.0; m * n];
        gemm_nt(m, k, n, a.data(), &bt, &mut c3);
        for i in 0..m * n {
            assert!((c1[i] - c2[i]).abs() < 1e-5);
            assert!((c1[i] - c3[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn explicit_map_matches_manual() {
        // out [2,3,2], input [2,1,2]
        let m = BroadcastMap::new(&[2, 3, 2], &[2, 1, 2]);
        let got: Vec<usize> = (0..12).map(|i| m.index(i)).collect();
        assert_eq!(got, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn permute_roundtrip() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let (p, s) = permute(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        assert_eq!(p[1], 4.0); // out[0,0,1] = in[0,1,0]
        let (back, s2) = permute(&p, &s, &inverse_permutation(&[2, 0, 1]));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, data);
    }
}
