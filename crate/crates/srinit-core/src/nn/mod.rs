//! Neural-network layers with explicit forward/backward passes.
//!
//! Everything runs on `f32` CPU tensors in NCHW layout. Convolutions lower to
//! im2col + GEMM; reductions accumulate in `f64` and always in a fixed order,
//! so results are bit-identical regardless of the rayon thread count.

mod conv;
mod linear;
mod norm;
pub mod ops;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};

use ndarray::{ArrayViewD, ArrayViewMutD};

/// What a parameter tensor is, which determines its re-initialization rule
/// and whether it counts as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Convolution kernel, shape `(out_c, in_c, kh, kw)`.
    ConvWeight,
    /// Fully-connected weight, shape `(out, in)`.
    LinearWeight,
    /// Additive bias vector.
    Bias,
    /// Normalization scale (gamma).
    NormScale,
    /// Normalization shift (beta).
    NormShift,
    /// Normalization running mean (not trainable).
    NormRunningMean,
    /// Normalization running variance (not trainable).
    NormRunningVar,
}

impl TensorKind {
    /// Whether the tensor receives gradient updates.
    pub fn trainable(self) -> bool {
        !matches!(self, TensorKind::NormRunningMean | TensorKind::NormRunningVar)
    }

    /// Receptive input size for the Kaiming rule, when applicable.
    pub fn fan_in(self, shape: &[usize]) -> Option<usize> {
        match self {
            TensorKind::ConvWeight => Some(shape[1] * shape[2] * shape[3]),
            TensorKind::LinearWeight => Some(shape[1]),
            _ => None,
        }
    }
}

/// Read-only visitor over a layer's named tensors.
pub trait VisitTensors {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, ArrayViewD<'_, f32>));
}

/// Mutable visitor over a layer's named tensors.
pub trait VisitTensorsMut {
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ArrayViewMutD<'_, f32>),
    );

    /// Visits `(name, kind, param, grad)` for every trainable tensor.
    fn visit_param_grad(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ArrayViewMutD<'_, f32>, ArrayViewD<'_, f32>),
    );

    /// Clears accumulated gradients.
    fn zero_grad(&mut self);
}

pub(crate) fn join_name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}
