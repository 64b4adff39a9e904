//! Batch normalization over NCHW maps.

use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array4, Axis};

use super::{join_name, TensorKind, VisitTensors, VisitTensorsMut};

/// Batch statistics captured by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Array1<f32>,
    pub inv_std: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
    pub momentum: f32,
    pub grad_gamma: Array1<f32>,
    pub grad_beta: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel mean/biased variance over `(N, H, W)`, accumulated in f64
    /// in index order.
    fn batch_stats(x: &Array4<f32>) -> (Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let stats: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for ni in 0..n {
                    for v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                        let vf = f64::from(*v);
                        sum += vf;
                        sq += vf * vf;
                    }
                }
                let mean = sum / m;
                (mean, (sq / m - mean * mean).max(0.0))
            })
            .collect();
        stats.into_iter().unzip()
    }

    /// Training forward: normalizes with batch statistics and updates the
    /// running estimates (unbiased variance, PyTorch convention).
    pub fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BnCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channel mismatch");
        let m = (n * h * w) as f64;
        let (means, vars) = Self::batch_stats(x);

        let mut mean = Array1::<f32>::zeros(c);
        let mut inv_std = Array1::<f32>::zeros(c);
        for ci in 0..c {
            mean[ci] = means[ci] as f32;
            inv_std[ci] = (1.0 / (vars[ci] + f64::from(self.eps)).sqrt()) as f32;
            let unbiased = if m > 1.0 { vars[ci] * m / (m - 1.0) } else { vars[ci] };
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * means[ci] as f32;
            self.running_var[ci] =
                (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased as f32;
        }

        let y = self.affine(x, &mean, &inv_std);
        (y, BnCache { mean, inv_std })
    }

    /// Inference forward using the running statistics.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let c = self.channels();
        let mut inv_std = Array1::<f32>::zeros(c);
        for ci in 0..c {
            inv_std[ci] = 1.0 / (self.running_var[ci] + self.eps).sqrt();
        }
        self.affine(x, &self.running_mean.clone(), &inv_std)
    }

    fn affine(&self, x: &Array4<f32>, mean: &Array1<f32>, inv_std: &Array1<f32>) -> Array4<f32> {
        let mut y = x.clone();
        y.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut img| {
            for (ci, mut plane) in img.axis_iter_mut(Axis(0)).enumerate() {
                let scale = self.gamma[ci] * inv_std[ci];
                let shift = self.beta[ci] - mean[ci] * scale;
                plane.map_inplace(|v| *v = *v * scale + shift);
            }
        });
        y
    }

    /// Training backward. Accumulates gamma/beta gradients and returns dx.
    pub fn backward_train(
        &mut self,
        x: &Array4<f32>,
        dy: &Array4<f32>,
        cache: &BnCache,
        param_grads: bool,
    ) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;

        // s1 = Σ dy, s2 = Σ dy·x̂ per channel.
        let sums: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mu = f64::from(cache.mean[ci]);
                let is = f64::from(cache.inv_std[ci]);
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for ni in 0..n {
                    let xs = x.index_axis(Axis(0), ni);
                    let gs = dy.index_axis(Axis(0), ni);
                    let xp = xs.index_axis(Axis(0), ci);
                    let gp = gs.index_axis(Axis(0), ci);
                    for (xv, gv) in xp.iter().zip(gp.iter()) {
                        let xhat = (f64::from(*xv) - mu) * is;
                        s1 += f64::from(*gv);
                        s2 += f64::from(*gv) * xhat;
                    }
                }
                (s1, s2)
            })
            .collect();

        if param_grads {
            for ci in 0..c {
                self.grad_beta[ci] += sums[ci].0 as f32;
                self.grad_gamma[ci] += sums[ci].1 as f32;
            }
        }

        let mut dx = dy.clone();
        dx.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut gimg, ximg)| {
                for ci in 0..c {
                    let (s1, s2) = sums[ci];
                    let mu = cache.mean[ci];
                    let is = cache.inv_std[ci];
                    let k = self.gamma[ci] * is;
                    let s1m = (s1 / m) as f32;
                    let s2m = (s2 / m) as f32;
                    let mut gp = gimg.index_axis_mut(Axis(0), ci);
                    let xp = ximg.index_axis(Axis(0), ci);
                    ndarray::Zip::from(&mut gp).and(&xp).for_each(|g, &xv| {
                        let xhat = (xv - mu) * is;
                        *g = k * (*g - s1m - xhat * s2m);
                    });
                }
            });
        dx
    }

    /// Inference-mode backward (running statistics are constants, so the map
    /// is a per-channel affine). Input gradients only.
    pub fn backward_eval(&self, dy: &Array4<f32>) -> Array4<f32> {
        let c = self.channels();
        let mut dx = dy.clone();
        dx.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut img| {
            for ci in 0..c {
                let k = self.gamma[ci] / (self.running_var[ci] + self.eps).sqrt();
                img.index_axis_mut(Axis(0), ci).map_inplace(|v| *v *= k);
            }
        });
        dx
    }
}

impl VisitTensors for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewD<'_, f32>)) {
        f(
            &join_name(prefix, "gamma"),
            TensorKind::NormScale,
            self.gamma.view().into_dyn(),
        );
        f(
            &join_name(prefix, "beta"),
            TensorKind::NormShift,
            self.beta.view().into_dyn(),
        );
        f(
            &join_name(prefix, "running_mean"),
            TensorKind::NormRunningMean,
            self.running_mean.view().into_dyn(),
        );
        f(
            &join_name(prefix, "running_var"),
            TensorKind::NormRunningVar,
            self.running_var.view().into_dyn(),
        );
    }
}

impl VisitTensorsMut for BatchNorm2d {
    fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewMutD<'_, f32>),
    ) {
        f(
            &join_name(prefix, "gamma"),
            TensorKind::NormScale,
            self.gamma.view_mut().into_dyn(),
        );
        f(
            &join_name(prefix, "beta"),
            TensorKind::NormShift,
            self.beta.view_mut().into_dyn(),
        );
        f(
            &join_name(prefix, "running_mean"),
            TensorKind::NormRunningMean,
            self.running_mean.view_mut().into_dyn(),
        );
        f(
            &join_name(prefix, "running_var"),
            TensorKind::NormRunningVar,
            self.running_var.view_mut().into_dyn(),
        );
    }

    fn visit_param_grad(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, ndarray::ArrayViewMutD<'_, f32>, ndarray::ArrayViewD<'_, f32>),
    ) {
        f(
            &join_name(prefix, "gamma"),
            TensorKind::NormScale,
            self.gamma.view_mut().into_dyn(),
            self.grad_gamma.view().into_dyn(),
        );
        f(
            &join_name(prefix, "beta"),
            TensorKind::NormShift,
            self.beta.view_mut().into_dyn(),
            self.grad_beta.view().into_dyn(),
        );
    }

    fn zero_grad(&mut self) {
        self.grad_gamma.fill(0.0);
        self.grad_beta.fill(0.0);
    }
}
