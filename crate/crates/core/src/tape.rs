//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, which is already a topological order. [`Tape::backward`] walks the
//! records in reverse once and returns gradients for every leaf that
//! requires them.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{
    broadcast_shape, gemm_nn, gemm_nt, gemm_tn, inverse_permutation, permute, BroadcastMap,
    TensorOf,
};

/// Pointwise nonlinearity used inside feed-forward blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `x·Φ(x)` with the exact normal CDF.
    Gelu,
    /// Tanh approximation of GELU.
    GeluNew,
    Silu,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::GeluNew,
        Activation::Gelu,
        Activation::Silu,
        Activation::Relu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::GeluNew => "gelu_new",
            Activation::Silu => "silu",
        }
    }

    /// Scalar forward value.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2)),
            Activation::GeluNew => {
                0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + GELU_NEW_COEF * x * x * x)))
            }
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Scalar derivative; relu uses subgradient 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                let pdf = libm::exp(-0.5 * x * x) * FRAC_1_SQRT_2PI;
                cdf + x * pdf
            }
            Activation::GeluNew => {
                let inner = SQRT_2_OVER_PI * (x + GELU_NEW_COEF * x * x * x);
                let t = libm::tanh(inner);
                let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_NEW_COEF * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "gelu_new" => Ok(Activation::GeluNew),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::config(
                "activation",
                format!("unknown kind {other:?} (expected relu, gelu, gelu_new or silu)"),
            )),
        }
    }
}

pub(crate) const GELU_NEW_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Which side of the attention product a relative-position term contracts with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelMode {
    /// `out[.., i, j] = x[.., i, :] · table[i, j, :]`
    Query,
    /// `out[.., i, j] = x[.., j, :] · table[i, j, :]`
    Key,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Act(Activation),
    Tanh,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
        map_a: BroadcastMap,
        map_b: BroadcastMap,
    },
    Sub {
        a: usize,
        b: usize,
        map_a: BroadcastMap,
        map_b: BroadcastMap,
    },
    Mul {
        a: usize,
        b: usize,
        map_a: BroadcastMap,
        map_b: BroadcastMap,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Unary {
        a: usize,
        kind: Unary,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<f64>,
    },
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    RelScores {
        x: usize,
        table: usize,
        mode: RelMode,
    },
    CrossEntropy {
        logits: usize,
        /// Per-row weight divided by the total weight; 0 for ignored rows.
        row_scale: Vec<f64>,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
}

struct Node<'a, T: Element> {
    value: Cow<'a, TensorOf<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder. Parameters can be borrowed for the tape's lifetime so
/// a forward pass does not copy the model.
#[derive(Default)]
pub struct TapeOf<'a, T: Element> {
    nodes: Vec<Node<'a, T>>,
}

pub type Tape<'a> = TapeOf<'a, f32>;
pub type Gradients = GradientsOf<f32>;

impl<T: Element> fmt::Debug for TapeOf<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.nodes.len()).finish()
    }
}

/// Gradients of the leaves reachable from a loss.
#[derive(Debug)]
pub struct GradientsOf<T> {
    grads: Vec<Option<TensorOf<T>>>,
}

impl<T: Element> GradientsOf<T> {
    /// Gradient of `v`, or `None` when `v` is not a leaf reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&TensorOf<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<TensorOf<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`; zeros of `shape` when unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> TensorOf<T> {
        self.get(v).cloned().unwrap_or_else(|| TensorOf::zeros(shape))
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// Matrix offsets (in matrices) into `a` and `b` for each output batch.
    pairs: Vec<(usize, usize)>,
    out_shape: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    if b_batch.is_empty() {
        // Fold all leading axes of `a` into rows.
        let rows: usize = a_batch.iter().product::<usize>() * m;
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, n]);
        return Ok(MatmulPlan {
            m: rows,
            k,
            n,
            pairs: vec![(0, 0)],
            out_shape,
        });
    }
    let batch = broadcast_shape(a_batch, b_batch).ok_or_else(|| Error::shape("matmul", a, b))?;
    let map_a = BroadcastMap::new(&batch, a_batch);
    let map_b = BroadcastMap::new(&batch, b_batch);
    let count: usize = batch.iter().product();
    let pairs = (0..count).map(|t| (map_a.index(t), map_b.index(t))).collect();
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        pairs,
        out_shape,
    })
}

impl<'a, T: Element> TapeOf<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a TensorOf<T>) -> Var {
        self.push_node(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, t: TensorOf<T>, requires_grad: bool) -> Var {
        self.push_node(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: TensorOf<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &TensorOf<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_node(&mut self, value: Cow<'a, TensorOf<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: TensorOf<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(Cow::Owned(value), op, requires_grad)
    }

    fn data(&self, i: usize) -> &[T] {
        self.nodes[i].value.data()
    }

    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = matmul_plan(self.shape(a), self.shape(b))?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::ZERO; plan.pairs.len() * m * n];
        {
            let (ad, bd) = (self.data(a.0), self.data(b.0));
            for (t, &(ia, ib)) in plan.pairs.iter().enumerate() {
                gemm_nn(
                    m,
                    k,
                    n,
                    &ad[ia * m * k..(ia + 1) * m * k],
                    &bd[ib * k * n..(ib + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let value = TensorOf::new(plan.out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(TensorOf<T>, BroadcastMap, BroadcastMap)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let map_a = BroadcastMap::new(&out_shape, sa);
        let map_b = BroadcastMap::new(&out_shape, sb);
        let numel: usize = out_shape.iter().product();
        let (ad, bd) = (self.data(a.0), self.data(b.0));
        let out = match (&map_a, &map_b) {
            (BroadcastMap::Identity, BroadcastMap::Identity) => {
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            }
            (BroadcastMap::Identity, BroadcastMap::Cyclic(nb)) => ad
                .chunks(*nb)
                .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect(),
            (BroadcastMap::Identity, BroadcastMap::Middle { inner, repeat }) => ad
                .chunks(*inner)
                .enumerate()
                .flat_map(|(c, chunk)| {
                    let row = &bd[(c / repeat) * inner..(c / repeat + 1) * inner];
                    chunk.iter().zip(row).map(|(&x, &y)| f(x, y))
                })
                .collect(),
            _ => (0..numel)
                .map(|i| f(ad[map_a.index(i)], bd[map_b.index(i)]))
                .collect(),
        };
        Ok((TensorOf::new(out_shape, out)?, map_a, map_b))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map_a, map_b) = self.binary(a, b, "add", |x, y| x + y)?;
        let op = Op::Add {
            a: a.0,
            b: b.0,
            map_a,
            map_b,
        };
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map_a, map_b) = self.binary(a, b, "sub", |x, y| x - y)?;
        let op = Op::Sub {
            a: a.0,
            b: b.0,
            map_a,
            map_b,
        };
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map_a, map_b) = self.binary(a, b, "mul", |x, y| x * y)?;
        let op = Op::Mul {
            a: a.0,
            b: b.0,
            map_a,
            map_b,
        };
        Ok(self.push(value, op, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let f = T::from_f64(factor);
        let data = t.data().iter().map(|&x| x * f).collect();
        let value = TensorOf::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { a: a.0, factor }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&x| x >= shape.len() || core::mem::replace(&mut seen[x], true))
        {
            return Err(Error::shape("permute", shape, axes));
        }
        let (data, out_shape) = permute(self.data(a.0), shape, axes);
        let value = TensorOf::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                a: a.0,
                axes: axes.to_vec(),
            },
            &[a.0],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Act(act) => T::from_f64(act.apply(x.to_f64())),
                Unary::Tanh => T::from_f64(libm::tanh(x.to_f64())),
            })
            .collect();
        let value = TensorOf::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Unary { a: a.0, kind }, &[a.0])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        self.unary(a, Unary::Act(kind))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.last_dim();
        if n == 0 {
            return Err(Error::shape("softmax", t.shape(), &[]));
        }
        let mut out = vec![T::ZERO; t.numel()];
        for (row, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, dst);
        }
        let value = TensorOf::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a: a.0 }, &[a.0]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.last_dim();
        if n == 0 {
            return Err(Error::shape("log_softmax", t.shape(), &[]));
        }
        let mut out = vec![T::ZERO; t.numel()];
        for (row, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            let lse = log_sum_exp(row);
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = T::from_f64(x.to_f64() - lse);
            }
        }
        let value = TensorOf::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax { a: a.0 }, &[a.0]))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gamma)));
        }
        let rows = t.numel() / d;
        let mut xhat = vec![T::ZERO; t.numel()];
        let mut rstd = vec![0.0f64; rows];
        let mut out = vec![T::ZERO; t.numel()];
        let (g, b) = (self.data(gamma.0), self.data(beta.0));
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v.to_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..d {
                let xh = T::from_f64((row[j].to_f64() - mean) * rs);
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = TensorOf::new(t.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            rstd,
        };
        Ok(self.push(value, op, &[x.0, gamma.0, beta.0]))
    }

    /// Inverted dropout. Identity (the same `Var`) when not training or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f32, training: bool, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(
                "dropout",
                format!("probability {p} outside [0, 1)"),
            ));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - p as f64));
        let t = self.value(a);
        let mask: Vec<T> = (0..t.numel())
            .map(|_| if rng.uniform_f32() < p { T::ZERO } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = TensorOf::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { a: a.0, mask }, &[a.0]))
    }

    /// Selects rows of a `[rows, d]` table: output `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", shape, &[ids.len()]));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab_size: rows,
            });
        }
        let src = self.data(table.0);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = TensorOf::new(vec![ids.len(), d], out)?;
        let op = Op::Gather {
            table: table.0,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, &[table.0]))
    }

    /// Relative-position attention term. `x: [B, A, T, H]`, `table: [T, T, H]`
    /// (a per-pair gathered embedding), output `[B, A, T, T]`.
    pub fn rel_scores(&mut self, x: Var, table: Var, mode: RelMode) -> Result<Var> {
        let (sx, st) = (self.shape(x), self.shape(table));
        if sx.len() != 4 || st.len() != 3 || st[0] != sx[2] || st[1] != sx[2] || st[2] != sx[3] {
            return Err(Error::shape("rel_scores", sx, st));
        }
        let (ba, t, h) = (sx[0] * sx[1], sx[2], sx[3]);
        let out_shape = vec![sx[0], sx[1], t, t];
        let (xd, rd) = (self.data(x.0), self.data(table.0));
        let mut out = vec![T::ZERO; ba * t * t];
        let (th, tt) = ((t * h) as isize, (t * t) as isize);
        // One strided product per query position (Query) or key position (Key).
        for p in 0..t {
            match mode {
                RelMode::Query => T::gemm(
                    ba, h, t,
                    &xd[p * h..], (th, 1),
                    &rd[p * t * h..], (1, h as isize),
                    &mut out[p * t..], (tt, 1),
                ),
                RelMode::Key => T::gemm(
                    ba, h, t,
                    &xd[p * h..], (th, 1),
                    &rd[p * h..], (1, th),
                    &mut out[p..], (tt, t as isize),
                ),
            }
        }
        let value = TensorOf::new(out_shape, out)?;
        let op = Op::RelScores {
            x: x.0,
            table: table.0,
            mode,
        };
        Ok(self.push(value, op, &[x.0, table.0]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits: [N, V]`. Rows labelled `ignore_index` are skipped; with
    /// `class_weights` the mean is weighted by each row's target class.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u32],
        ignore_index: u32,
        class_weights: Option<&[f32]>,
    ) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", shape, &[labels.len()]));
        }
        let (rows, v) = (shape[0], shape[1]);
        if let Some(w) = class_weights {
            if w.len() != v {
                return Err(Error::shape("cross_entropy", shape, &[w.len()]));
            }
        }
        let data = self.data(logits.0);
        let mut probs = vec![T::ZERO; rows * v];
        let mut row_w = vec![0.0f64; rows];
        let mut targets = vec![0usize; rows];
        let mut total = 0.0f64;
        let mut weight_sum = 0.0f64;
        for r in 0..rows {
            let label = labels[r];
            if label == ignore_index {
                continue;
            }
            if label as usize >= v {
                return Err(Error::TokenOutOfRange {
                    id: label,
                    vocab_size: v,
                });
            }
            let row = &data[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = T::from_f64(libm::exp(x.to_f64() - lse));
            }
            let w = class_weights.map_or(1.0, |w| w[label as usize] as f64);
            total += w * (lse - row[label as usize].to_f64());
            weight_sum += w;
            row_w[r] = w;
            targets[r] = label as usize;
        }
        if weight_sum <= 0.0 {
            return Err(Error::NoSupervisedPositions);
        }
        let loss = T::from_f64(total / weight_sum);
        let row_scale = row_w.iter().map(|&w| w / weight_sum).collect();
        let op = Op::CrossEntropy {
            logits: logits.0,
            row_scale,
            targets,
            probs,
        };
        Ok(self.push(TensorOf::scalar(loss), op, &[logits.0]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a.0).iter().map(|&x| x.to_f64()).sum();
        self.push(TensorOf::scalar(T::from_f64(s)), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a.0);
        let s: f64 = d.iter().map(|&x| x.to_f64()).sum();
        let n = d.len().max(1) as f64;
        self.push(TensorOf::scalar(T::from_f64(s / n)), Op::Mean { a: a.0 }, &[a.0])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradientsOf<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut out: Vec<Option<TensorOf<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                out[i] = Some(TensorOf::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(GradientsOf { grads: out })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let send = |grads: &mut [Option<Vec<T>>], j: usize, contrib: Vec<T>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += *c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let plan = matmul_plan(self.nodes[*a].value.shape(), self.nodes[*b].value.shape())?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.nodes[*a].requires_grad {
                    let mut ga = vec![T::ZERO; ad.len()];
                    for (t, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                        );
                    }
                    send(grads, *a, ga);
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = vec![T::ZERO; bd.len()];
                    for (t, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        gemm_tn(
                            k,
                            m,
                            n,
                            &ad[ia * m * k..(ia + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                        );
                    }
                    send(grads, *b, gb);
                }
            }
            Op::Add { a, b, map_a, map_b } => {
                if self.nodes[*a].requires_grad {
                    send(grads, *a, map_a.reduce(g, self.data(*a).len()));
                }
                if self.nodes[*b].requires_grad {
                    send(grads, *b, map_b.reduce(g, self.data(*b).len()));
                }
            }
            Op::Sub { a, b, map_a, map_b } => {
                if self.nodes[*a].requires_grad {
                    send(grads, *a, map_a.reduce(g, self.data(*a).len()));
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = map_b.reduce(g, self.data(*b).len());
                    gb.iter_mut().for_each(|v| *v = -*v);
                    send(grads, *b, gb);
                }
            }
            Op::Mul { a, b, map_a, map_b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.nodes[*a].requires_grad {
                    let prod: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(t, &gv)| gv * bd[map_b.index(t)])
                        .collect();
                    send(grads, *a, map_a.reduce(&prod, ad.len()));
                }
                if self.nodes[*b].requires_grad {
                    let prod: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(t, &gv)| gv * ad[map_a.index(t)])
                        .collect();
                    send(grads, *b, map_b.reduce(&prod, bd.len()));
                }
            }
            Op::Scale { a, factor } => {
                let f = T::from_f64(*factor);
                send(grads, *a, g.iter().map(|&v| v * f).collect());
            }
            Op::Reshape { a } => send(grads, *a, g.to_vec()),
            Op::Permute { a, axes } => {
                let (back, _) = permute(g, node.value.shape(), &inverse_permutation(axes));
                send(grads, *a, back);
            }
            Op::Unary { a, kind } => {
                let contrib = match kind {
                    Unary::Act(act) => g
                        .iter()
                        .zip(self.data(*a))
                        .map(|(&gv, &x)| T::from_f64(gv.to_f64() * act.derivative(x.to_f64())))
                        .collect(),
                    Unary::Tanh => g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * (T::ONE - y * y))
                        .collect(),
                };
                send(grads, *a, contrib);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut gx = vec![T::ZERO; y.len()];
                for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv.to_f64() * gv.to_f64()).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = T::from_f64(yv.to_f64() * (gv.to_f64() - s));
                    }
                }
                send(grads, *a, gx);
            }
            Op::LogSoftmax { a } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut gx = vec![T::ZERO; y.len()];
                for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: f64 = gr.iter().map(|&v| v.to_f64()).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = T::from_f64(gv.to_f64() - libm::exp(yv.to_f64()) * s);
                    }
                }
                send(grads, *a, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = self.data(*gamma);
                let mut gg = vec![T::ZERO; d];
                let mut gbeta = vec![T::ZERO; d];
                let mut gx = vec![T::ZERO; g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0f64;
                    let mut mean_dxh_xh = 0.0f64;
                    for j in 0..d {
                        gg[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                        let dxh = (gr[j] * gam[j]).to_f64();
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j].to_f64();
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = (gr[j] * gam[j]).to_f64();
                        gx[r * d + j] =
                            T::from_f64(rs * (dxh - mean_dxh - xh[j].to_f64() * mean_dxh_xh));
                    }
                }
                send(grads, *x, gx);
                send(grads, *gamma, gg);
                send(grads, *beta, gbeta);
            }
            Op::Dropout { a, mask } => {
                send(grads, *a, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect());
            }
            Op::Gather { table, ids } => {
                let shape = self.nodes[*table].value.shape();
                let d = shape[1];
                let mut gt = vec![T::ZERO; shape[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, &src) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *dst += src;
                    }
                }
                send(grads, *table, gt);
            }
            Op::RelScores { x, table, mode } => {
                let sx = self.nodes[*x].value.shape();
                let (ba, t, h) = (sx[0] * sx[1], sx[2], sx[3]);
                let (xd, rd) = (self.data(*x), self.data(*table));
                let mut gx = vec![T::ZERO; xd.len()];
                let mut gr = vec![T::ZERO; rd.len()];
                let (th, tt) = ((t * h) as isize, (t * t) as isize);
                for p in 0..t {
                    let (g_off, g_strides, r_off, r_rs) = match mode {
                        RelMode::Query => (p * t, (tt, 1), p * t * h, h as isize),
                        RelMode::Key => (p, (tt, t as isize), p * h, th),
                    };
                    T::gemm(
                        ba, t, h,
                        &g[g_off..], g_strides,
                        &rd[r_off..], (r_rs, 1),
                        &mut gx[p * h..], (th, 1),
                    );
                    T::gemm(
                        t, ba, h,
                        &g[g_off..], (g_strides.1, g_strides.0),
                        &xd[p * h..], (th, 1),
                        &mut gr[r_off..], (r_rs, 1),
                    );
                }
                send(grads, *x, gx);
                send(grads, *table, gr);
            }
            Op::CrossEntropy {
                logits,
                row_scale,
                targets,
                probs,
            } => {
                let v = self.nodes[*logits].value.last_dim();
                let upstream = g[0].to_f64();
                let mut gl = vec![T::ZERO; probs.len()];
                for (r, &scale) in row_scale.iter().enumerate() {
                    if scale == 0.0 {
                        continue;
                    }
                    let s = T::from_f64(scale * upstream);
                    let dst = &mut gl[r * v..(r + 1) * v];
                    for (d, &p) in dst.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *d = p * s;
                    }
                    dst[targets[r]] -= s;
                }
                send(grads, *logits, gl);
            }
            Op::Sum { a } => {
                send(grads, *a, vec![g[0]; self.data(*a).len()]);
            }
            Op::Mean { a } => {
                let n = self.data(*a).len();
                send(grads, *a, vec![T::from_f64(g[0].to_f64() / n.max(1) as f64); n]);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn log_sum_exp<T: Element>(row: &[T]) -> f64 {
    let max = row.iter().fold(T::NEG_INFINITY, |m, &x| m.max(x)).to_f64();
    let s: f64 = row.iter().map(|&x| libm::exp(x.to_f64() - max)).sum();
    max + libm::log(s)
}

pub(crate) fn softmax_row<T: Element>(row: &[T], dst: &mut [T]) {
    let max = row.iter().fold(T::NEG_INFINITY, |m, &x| m.max(x)).to_f64();
    let mut s = 0.0f64;
    for (d, &x) in dst.iter_mut().zip(row) {
        let e = libm::exp(x.to_f64() - max);
        *d = T::from_f64(e);
        s += e;
    }
    let inv = 1.0 / s;
    for d in dst.iter_mut() {
        *d = T::from_f64(d.to_f64() * inv);
    }
}
