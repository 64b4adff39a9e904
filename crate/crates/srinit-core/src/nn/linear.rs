//! Fully-connected layer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{join_name, TensorKind, VisitTensors, VisitTensorsMut};

#[derive(Debug, Clone)]
pub struct Linear {
    /// Shape `(out, in)`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub grad_weight: Array2<f32>,
    pub grad_bias: Array1<f32>,
}

impl Linear {
    pub fn zeros(out: usize, input: usize) -> Self {
        Linear {
            weight: Array2::zeros((out, input)),
            bias: Array1::zeros(out),
            grad_weight: Array2::zeros((out, input)),
            grad_bias: Array1::zeros(out),
        }
    }

    /// Kaiming-initialized: weights from N(0, 2/fan_in), bias zero.
    pub fn randn(out: usize, input: usize, rng: &mut impl Rng) -> Self {
        let mut l = Self::zeros(out, input);
        let normal = Normal::new(0.0f32, (2.0 / input as f32).sqrt()).unwrap();
        for v in l.weight.iter_mut() {
            *v = normal.sample(rng);
        }
        l
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim().1
    }

    /// `(N, in) -> (N, out)`.
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let n = x.dim().0;
        let mut y = Array2::<f32>::zeros((n, self.out_features()));
        general_mat_mul(1.0, x, &self.weight.t(), 0.0, &mut y);
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.bias;
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<f32>, dy: &Array2<f32>, param_grads: bool) -> Array2<f32> {
        if param_grads {
            general_mat_mul(1.0, &dy.t(), x, 1.0, &mut self.grad_weight);
            let n = dy.dim().0;
            for j in 0..self.out_features() {
                let mut acc = 0.0f64;
                for i in 0..n {
                    acc += f64::from(dy[(i, j)]);
                }
                self.grad_bias[j] += acc as f32;
            }
        }
        let mut dx = Array2::<f32>::zeros(x.raw_dim());
        general_mat_mul(1.0, dy, &self.weight, 0.0, &mut dx);
        dx
    }

    /// Input gradient only.
    pub fn backward_data(&self, dy: &Array2<f32>) -> Array2<f32> {
        let mut dx = Array2::<f32>::zeros((dy.dim().0, self.in_features()));
        general_mat_mul(1.0, dy, &self.weight, 0.0, &mut dx);
        dx
    }

    pub fn macs(&self) -> u64 {
        (self.out_features() * self.in_features()) as u64
    }
}

impl VisitTensors for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewD<'_, f32>)) {
        f(
            &join_name(prefix, "weight"),
            TensorKind::LinearWeight,
            self.weight.view().into_dyn(),
        );
        f(&join_name(prefix, "bias"), TensorKind::Bias, self.bias.view().into_dyn());
    }
}

impl VisitTensorsMut for Linear {
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewMutD<'_, f32>),
    ) {
        f(
            &join_name(prefix, "weight"),
            TensorKind::LinearWeight,
            self.weight.view_mut().into_dyn(),
        );
        f(&join_name(prefix, "bias"), TensorKind::Bias, self.bias.view_mut().into_dyn());
    }

    fn visit_param_grad(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewMutD<'_, f32>, ndarray::ArrayViewD<'_, f32>),
    ) {
        f(
            &join_name(prefix, "weight"),
            TensorKind::LinearWeight,
            self.weight.view_mut().into_dyn(),
            self.grad_weight.view().into_dyn(),
        );
        f(
            &join_name(prefix, "bias"),
            TensorKind::Bias,
            self.bias.view_mut().into_dyn(),
            self.grad_bias.view().into_dyn(),
        );
    }

    fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }
}
