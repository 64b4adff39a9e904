//! 2-D convolution lowered to im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{col2im, conv_out_dim, im2col};
use super::{join_name, TensorKind, VisitTensors, VisitTensorsMut};

/// Images per work chunk in the weight-gradient reduction. Fixed so the
/// summation order never depends on the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f32>,
    pub bias: Option<Array1<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub grad_weight: Array4<f32>,
    pub grad_bias: Option<Array1<f32>>,
}

impl Conv2d {
    pub fn zeros(
        out_c: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Conv2d {
            weight: Array4::zeros((out_c, in_c, kernel, kernel)),
            bias: bias.then(|| Array1::zeros(out_c)),
            stride,
            padding,
            grad_weight: Array4::zeros((out_c, in_c, kernel, kernel)),
            grad_bias: bias.then(|| Array1::zeros(out_c)),
        }
    }

    /// Kaiming-initialized convolution: weights from N(0, 2/fan_in) with
    /// fan_in = in_c * kernel², bias (when present) zero.
    pub fn randn(
        out_c: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::zeros(out_c, in_c, kernel, stride, padding, bias);
        let fan_in = in_c * kernel * kernel;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
        for v in conv.weight.iter_mut() {
            *v = normal.sample(rng);
        }
        conv
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.kernel(), self.stride, self.padding),
            conv_out_dim(w, self.kernel(), self.stride, self.padding),
        )
    }

    fn weight_mat(&self) -> ArrayView2<'_, f32> {
        let (oc, ic, kh, kw) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("conv weight is standard layout")
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.padding == 0
    }

    /// Batch forward: `(N, C, H, W) -> (N, OC, OH, OW)`.
    pub fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channel mismatch");
        let (oh, ow) = self.output_hw(h, w);
        let oc = self.out_channels();
        let ck = c * self.kernel() * self.kernel();
        let wmat = self.weight_mat();

        let mut y = Array4::<f32>::zeros((n, oc, oh, ow));
        y.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each_init(
                || Array2::<f32>::zeros((ck, oh * ow)),
                |col, (yn, xn)| {
                    let mut out = yn
                        .into_shape_with_order((oc, oh * ow))
                        .expect("output is standard layout");
                    if self.is_pointwise() {
                        let xmat = xn
                            .into_shape_with_order((c, h * w))
                            .expect("input is standard layout");
                        general_mat_mul(1.0, &wmat, &xmat, 0.0, &mut out);
                    } else {
                        im2col(
                            xn,
                            self.kernel(),
                            self.stride,
                            self.padding,
                            col.as_slice_mut().unwrap(),
                        );
                        general_mat_mul(1.0, &wmat, &col.view(), 0.0, &mut out);
                    }
                },
            );

        if let Some(b) = &self.bias {
            y.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut img| {
                for (ci, mut plane) in img.axis_iter_mut(Axis(0)).enumerate() {
                    plane.map_inplace(|v| *v += b[ci]);
                }
            });
        }
        y
    }

    /// Backward pass. Accumulates parameter gradients when `param_grads` is
    /// set and returns the input gradient.
    pub fn backward(
        &mut self,
        x: &Array4<f32>,
        dy: &Array4<f32>,
        param_grads: bool,
    ) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (_, oc, oh, ow) = dy.dim();
        let k = self.kernel();
        let ck = c * k * k;

        if param_grads {
            // Weight gradient: sum of per-image dy_n · col_nᵀ, reduced in
            // fixed chunk order.
            let chunks: Vec<Array2<f32>> = (0..n.div_ceil(GRAD_CHUNK))
                .into_par_iter()
                .map(|chunk| {
                    let lo = chunk * GRAD_CHUNK;
                    let hi = (lo + GRAD_CHUNK).min(n);
                    let mut partial = Array2::<f32>::zeros((oc, ck));
                    let mut col = Array2::<f32>::zeros((ck, oh * ow));
                    for ni in lo..hi {
                        let dyn_ = dy
                            .index_axis(Axis(0), ni)
                            .into_shape_with_order((oc, oh * ow))
                            .unwrap();
                        if self.is_pointwise() {
                            let xmat = x
                                .index_axis(Axis(0), ni)
                                .into_shape_with_order((c, h * w))
                                .unwrap();
                            general_mat_mul(1.0, &dyn_, &xmat.t(), 1.0, &mut partial);
                        } else {
                            im2col(
                                x.index_axis(Axis(0), ni),
                                k,
                                self.stride,
                                self.padding,
                                col.as_slice_mut().unwrap(),
                            );
                            general_mat_mul(1.0, &dyn_, &col.t(), 1.0, &mut partial);
                        }
                    }
                    partial
                })
                .collect();
            let mut gw = self
                .grad_weight
                .view_mut()
                .into_shape_with_order((oc, ck))
                .unwrap();
            for partial in chunks {
                gw += &partial;
            }

            if let Some(gb) = &mut self.grad_bias {
                let sums: Vec<f64> = (0..oc)
                    .into_par_iter()
                    .map(|ci| {
                        let mut acc = 0.0f64;
                        for ni in 0..n {
                            for v in dy.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                                acc += f64::from(*v);
                            }
                        }
                        acc
                    })
                    .collect();
                for (ci, s) in sums.into_iter().enumerate() {
                    gb[ci] += s as f32;
                }
            }
        }

        self.backward_data(dy, (h, w))
    }

    /// Input gradient only; does not read or touch parameters' gradients.
    pub fn backward_data(&self, dy: &Array4<f32>, in_hw: (usize, usize)) -> Array4<f32> {
        let (n, oc, oh, ow) = dy.dim();
        let (h, w) = in_hw;
        let c = self.in_channels();
        let k = self.kernel();
        let ck = c * k * k;
        let wmat = self.weight_mat();
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        dx.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(dy.axis_iter(Axis(0)).into_par_iter())
            .for_each_init(
                || Array2::<f32>::zeros((ck, oh * ow)),
                |col, (dxn, dyn_)| {
                    let dymat = dyn_.into_shape_with_order((oc, oh * ow)).unwrap();
                    if self.is_pointwise() {
                        let mut dxmat = dxn.into_shape_with_order((c, h * w)).unwrap();
                        general_mat_mul(1.0, &wmat.t(), &dymat, 0.0, &mut dxmat);
                    } else {
                        general_mat_mul(1.0, &wmat.t(), &dymat, 0.0, col);
                        col2im(
                            col.as_slice().unwrap(),
                            k,
                            self.stride,
                            self.padding,
                            dxn,
                        );
                    }
                },
            );
        dx
    }

    /// MACs per forward pass for the given input spatial size.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w);
        self.out_channels() as u64
            * self.in_channels() as u64
            * (self.kernel() * self.kernel()) as u64
            * (oh * ow) as u64
    }
}

impl VisitTensors for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewD<'_, f32>)) {
        f(
            &join_name(prefix, "weight"),
            TensorKind::ConvWeight,
            self.weight.view().into_dyn(),
        );
        if let Some(b) = &self.bias {
            f(&join_name(prefix, "bias"), TensorKind::Bias, b.view().into_dyn());
        }
    }
}

impl VisitTensorsMut for Conv2d {
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewMutD<'_, f32>),
    ) {
        f(
            &join_name(prefix, "weight"),
            TensorKind::ConvWeight,
            self.weight.view_mut().into_dyn(),
        );
        if let Some(b) = &mut self.bias {
            f(&join_name(prefix, "bias"), TensorKind::Bias, b.view_mut().into_dyn());
        }
    }

    fn visit_param_grad(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewMutD<'_, f32>, ndarray::ArrayViewD<'_, f32>),
    ) {
        f(
            &join_name(prefix, "weight"),
            TensorKind::ConvWeight,
            self.weight.view_mut().into_dyn(),
            self.grad_weight.view().into_dyn(),
        );
        if let (Some(b), Some(gb)) = (&mut self.bias, &self.grad_bias) {
            f(
                &join_name(prefix, "bias"),
                TensorKind::Bias,
                b.view_mut().into_dyn(),
                gb.view().into_dyn(),
            );
        }
    }

    fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        if let Some(gb) = &mut self.grad_bias {
            gb.fill(0.0);
        }
    }
}
