//! Central finite-difference checks for the differentiable tape operations.
//!
//! Each case is projected to a scalar with fixed random weights. The `f64`
//! instantiation is compared elementwise; the `f32` instantiation, whose
//! outputs carry rounding noise of order `ulp(f) / h`, is compared by the
//! norm of the whole gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::rng::RngState;
use crate::tape::{Activation, RelMode, TapeOf, Var};
use crate::tensor::TensorOf;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
/// Norm-wise bound for the single-precision pass, where central differences
/// carry roughly 1e-4 of rounding noise.
pub const F32_NORM_TOL: f64 = 5e-3;
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Worst elementwise relative error (absolute below [`ABS_FLOOR`]).
    pub worst_elem: f64,
    /// Worst relative error of a whole input's gradient vector.
    pub worst_norm: f64,
}

/// Compares the tape gradient of `Σ w ⊙ build(inputs)` against central
/// differences for every input element.
pub fn check<T: Element>(
    inputs: &[TensorOf<f64>],
    build: &dyn Fn(&mut TapeOf<T>, &[Var]) -> Var,
    seed: u64,
) -> GradReport {
    let inputs: Vec<TensorOf<T>> = inputs.iter().map(|x| x.cast()).collect();
    let mut tape = TapeOf::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = build(&mut tape, &vars);
    let mut rng = RngState::new(seed ^ 0x5eed);
    let w = TensorOf::<T>::rand_uniform(tape.shape(y), -1.0, 1.0, &mut rng);
    let wv = tape.constant(w.clone());
    let weighted = tape.mul(y, wv).expect("weights share the output shape");
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).expect("scalar loss");

    let eval = |xs: &[TensorOf<T>]| -> f64 {
        let mut t = TapeOf::<T>::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let y = build(&mut t, &vs);
        t.value(y)
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum()
    };

    let mut report = GradReport {
        worst_elem: 0.0,
        worst_norm: 0.0,
    };
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, inputs[k].shape());
        let (mut diff2, mut ref2) = (0.0f64, 0.0f64);
        for j in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = inputs[k].data()[j].to_f64();
            plus[k].data_mut()[j] = T::from_f64(x + STEP);
            minus[k].data_mut()[j] = T::from_f64(x - STEP);
            let step = plus[k].data()[j].to_f64() - minus[k].data()[j].to_f64();
            let fd = (eval(&plus) - eval(&minus)) / step;
            let a = analytic.data()[j].to_f64();
            let scale = fd.abs().max(a.abs());
            let err = if scale < ABS_FLOOR {
                (fd - a).abs()
            } else {
                (fd - a).abs() / scale
            };
            report.worst_elem = report.worst_elem.max(err);
            diff2 += (fd - a) * (fd - a);
            ref2 += (fd * fd).max(a * a);
        }
        let norm = if libm::sqrt(ref2) < ABS_FLOOR {
            libm::sqrt(diff2)
        } else {
            libm::sqrt(diff2 / ref2)
        };
        report.worst_norm = report.worst_norm.max(norm);
    }
    report
}

/// One case per differentiable operation (plus a composite attention block).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCase {
    Matmul2d,
    MatmulFoldsLeadingAxes,
    MatmulBroadcastBatch,
    AddBroadcast,
    SubBroadcastMiddleAxis,
    MulBroadcast,
    Scale,
    Reshape,
    Permute,
    Transpose,
    GeluNew,
    Gelu,
    Silu,
    Relu,
    Tanh,
    Softmax,
    LogSoftmax,
    LayerNorm,
    DropoutFixedMask,
    GatherRowsWithRepeats,
    RelScoresQuery,
    RelScoresKey,
    CrossEntropyWithIgnoredRows,
    CrossEntropyClassWeighted,
    Sum,
    Mean,
    AttentionBlock,
}

fn randn(shape: &[usize], rng: &mut RngState) -> TensorOf<f64> {
    TensorOf::randn(shape, 1.0, rng)
}

/// Moves values within `margin` of zero away from a kink.
fn away_from_zero(mut t: TensorOf<f64>, margin: f64) -> TensorOf<f64> {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
    t
}

impl GradCase {
    pub const ALL: [GradCase; 27] = [
        GradCase::Matmul2d,
        GradCase::MatmulFoldsLeadingAxes,
        GradCase::MatmulBroadcastBatch,
        GradCase::AddBroadcast,
        GradCase::SubBroadcastMiddleAxis,
        GradCase::MulBroadcast,
        GradCase::Scale,
        GradCase::Reshape,
        GradCase::Permute,
        GradCase::Transpose,
        GradCase::GeluNew,
        GradCase::Gelu,
        GradCase::Silu,
        GradCase::Relu,
        GradCase::Tanh,
        GradCase::Softmax,
        GradCase::LogSoftmax,
        GradCase::LayerNorm,
        GradCase::DropoutFixedMask,
        GradCase::GatherRowsWithRepeats,
        GradCase::RelScoresQuery,
        GradCase::RelScoresKey,
        GradCase::CrossEntropyWithIgnoredRows,
        GradCase::CrossEntropyClassWeighted,
        GradCase::Sum,
        GradCase::Mean,
        GradCase::AttentionBlock,
    ];

    pub fn inputs(self, rng: &mut RngState) -> Vec<TensorOf<f64>> {
        use GradCase::*;
        match self {
            Matmul2d => vec![randn(&[4, 5], rng), randn(&[5, 3], rng)],
            MatmulFoldsLeadingAxes => vec![randn(&[2, 3, 4], rng), randn(&[4, 5], rng)],
            MatmulBroadcastBatch => vec![randn(&[2, 1, 3, 4], rng), randn(&[3, 4, 2], rng)],
            AddBroadcast => vec![randn(&[3, 4], rng), randn(&[4], rng)],
            SubBroadcastMiddleAxis => vec![randn(&[2, 3, 4], rng), randn(&[2, 1, 4], rng)],
            MulBroadcast => vec![randn(&[2, 1, 4], rng), randn(&[3, 1], rng)],
            Scale | GeluNew | Gelu | Silu | Tanh | Sum | Mean => vec![randn(&[3, 5], rng)],
            Reshape => vec![randn(&[3, 4], rng), randn(&[2, 6], rng)],
            Permute => vec![randn(&[2, 3, 4], rng), randn(&[4, 2, 3], rng)],
            Transpose => vec![randn(&[2, 3, 4], rng), randn(&[3, 5], rng)],
            Relu => vec![away_from_zero(randn(&[3, 5], rng), 0.01)],
            Softmax | LogSoftmax => vec![randn(&[2, 3, 5], rng)],
            LayerNorm => vec![randn(&[2, 3, 6], rng), randn(&[6], rng), randn(&[6], rng)],
            DropoutFixedMask => vec![randn(&[4, 5], rng)],
            GatherRowsWithRepeats => vec![randn(&[5, 3], rng)],
            RelScoresQuery | RelScoresKey => vec![randn(&[2, 2, 3, 4], rng), randn(&[3, 3, 4], rng)],
            CrossEntropyWithIgnoredRows => vec![randn(&[6, 7], rng)],
            CrossEntropyClassWeighted => vec![randn(&[5, 3], rng)],
            AttentionBlock => vec![randn(&[2, 3, 4], rng), randn(&[4, 4], rng), randn(&[4, 4], rng)],
        }
    }

    pub fn build<T: Element>(self, t: &mut TapeOf<T>, v: &[Var]) -> Var {
        use GradCase::*;
        match self {
            Matmul2d | MatmulFoldsLeadingAxes | MatmulBroadcastBatch => t.matmul(v[0], v[1]).unwrap(),
            AddBroadcast => t.add(v[0], v[1]).unwrap(),
            SubBroadcastMiddleAxis => t.sub(v[0], v[1]).unwrap(),
            MulBroadcast => t.mul(v[0], v[1]).unwrap(),
            Scale => t.scale(v[0], -0.75),
            Reshape => {
                let r = t.reshape(v[0], &[2, 6]).unwrap();
                t.mul(r, v[1]).unwrap()
            }
            Permute => {
                let p = t.permute(v[0], &[2, 0, 1]).unwrap();
                t.mul(p, v[1]).unwrap()
            }
            Transpose => {
                let p = t.transpose(v[0]).unwrap();
                t.matmul(p, v[1]).unwrap()
            }
            GeluNew => t.activation(v[0], Activation::GeluNew),
            Gelu => t.activation(v[0], Activation::Gelu),
            Silu => t.activation(v[0], Activation::Silu),
            Relu => t.activation(v[0], Activation::Relu),
            Tanh => t.tanh(v[0]),
            Softmax => t.softmax(v[0]).unwrap(),
            LogSoftmax => t.log_softmax(v[0]).unwrap(),
            LayerNorm => t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
            DropoutFixedMask => {
                let mut mask_rng = RngState::new(77);
                t.dropout(v[0], 0.3, true, &mut mask_rng).unwrap()
            }
            GatherRowsWithRepeats => t.gather_rows(v[0], &[4, 0, 4, 2, 4]).unwrap(),
            RelScoresQuery => t.rel_scores(v[0], v[1], RelMode::Query).unwrap(),
            RelScoresKey => t.rel_scores(v[0], v[1], RelMode::Key).unwrap(),
            CrossEntropyWithIgnoredRows => t.cross_entropy(v[0], &[1, 2, 99, 6, 0, 3], 99, None).unwrap(),
            CrossEntropyClassWeighted => t
                .cross_entropy(v[0], &[0, 2, 1, 2, 0], u32::MAX, Some(&[0.5, 2.0, 1.25]))
                .unwrap(),
            Sum => t.sum(v[0]),
            Mean => t.mean(v[0]),
            AttentionBlock => {
                let q = t.matmul(v[0], v[1]).unwrap();
                let k = t.matmul(v[0], v[2]).unwrap();
                let kt = t.transpose(k).unwrap();
                let s = t.matmul(q, kt).unwrap();
                let s = t.scale(s, 0.5);
                let p = t.softmax(s).unwrap();
                t.matmul(p, v[0]).unwrap()
            }
        }
    }

    /// Checks `points` random inputs in both precisions. Returns the worst
    /// f64 elementwise error and the worst f32 norm-wise error.
    pub fn run(self, points: u64, seed: u64) -> GradReport {
        let mut worst = GradReport {
            worst_elem: 0.0,
            worst_norm: 0.0,
        };
        for point in 0..points {
            let mut rng = RngState::derive(seed, point);
            let inputs = self.inputs(&mut rng);
            let exact = check::<f64>(&inputs, &|t, v| self.build(t, v), point);
            let single = check::<f32>(&inputs, &|t, v| self.build(t, v), point);
            worst.worst_elem = worst.worst_elem.max(exact.worst_elem);
            worst.worst_norm = worst.worst_norm.max(single.worst_norm);
        }
        worst
    }

    pub fn passes(report: &GradReport) -> bool {
        report.worst_elem < REL_TOL && report.worst_norm < F32_NORM_TOL
    }
}
