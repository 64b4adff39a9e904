//! Stateless tensor operations: im2col lowering, activations, pooling, loss.

use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis};

/// Output spatial size of a convolution/pooling window.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding).saturating_sub(kernel) / stride + 1
}

/// Lowers one image `(C, H, W)` into a column matrix `(C*KH*KW, OH*OW)`.
///
/// `col` is a caller-provided buffer of exactly that length; out-of-bounds
/// taps are written as zero.
pub fn im2col(
    x: ArrayView3<'_, f32>,
    kernel: usize,
    stride: usize,
    padding: usize,
    col: &mut [f32],
) {
    let (c, h, w) = x.dim();
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    debug_assert_eq!(col.len(), c * kernel * kernel * oh * ow);
    let xs = x.as_slice().expect("im2col needs a contiguous view");

    let mut r = 0usize;
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = &mut col[r * oh * ow..(r + 1) * oh * ow];
                r += 1;
                for out_y in 0..oh {
                    let iy = (out_y * stride + kh) as isize - padding as isize;
                    let dst = &mut row[out_y * ow..(out_y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // Contiguous run of in-bounds taps.
                        let ix0 = kw as isize - padding as isize;
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ix0 + ox as isize;
                            *d = if ix >= 0 && ix < w as isize {
                                src_row[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kw) as isize - padding as isize;
                            *d = if ix >= 0 && ix < w as isize {
                                src_row[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into one image; inverse of [`im2col`].
pub fn col2im(
    col: &[f32],
    kernel: usize,
    stride: usize,
    padding: usize,
    mut x: ArrayViewMut3<'_, f32>,
) {
    let (c, h, w) = x.dim();
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    debug_assert_eq!(col.len(), c * kernel * kernel * oh * ow);
    let xs = x.as_slice_mut().expect("col2im needs a contiguous view");
    xs.fill(0.0);

    let mut r = 0usize;
    for ci in 0..c {
        let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
        for kh in 0..kernel {
            for kw in 0..kernel {
                let row = &col[r * oh * ow..(r + 1) * oh * ow];
                r += 1;
                for out_y in 0..oh {
                    let iy = (out_y * stride + kh) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[out_y * ow..(out_y + 1) * ow];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kw) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Elementwise rectifier.
pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    let mut y = x.clone();
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each(|mut img| img.map_inplace(|v| *v = v.max(0.0)));
    y
}

/// Backward rule used for rectifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluRule {
    /// Pass gradient where the forward activation was positive.
    Standard,
    /// Additionally zero the signal where the incoming gradient is negative
    /// (guided backpropagation).
    Guided,
}

/// Gradient of [`relu`] given the forward *output* `y`.
pub fn relu_backward(y: &Array4<f32>, dy: &Array4<f32>, rule: ReluRule) -> Array4<f32> {
    let mut dx = dy.clone();
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(y.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut g, out)| {
            ndarray::Zip::from(&mut g).and(&out).for_each(|gv, &ov| {
                let mut pass = ov > 0.0;
                if rule == ReluRule::Guided {
                    pass &= *gv > 0.0;
                }
                if !pass {
                    *gv = 0.0;
                }
            });
        });
    dx
}

/// Spatial mean per channel: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array2::<f32>::zeros((n, c));
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut row, img)| {
            for ci in 0..c {
                let mut acc = 0.0f64;
                for v in img.index_axis(Axis(0), ci).iter() {
                    acc += f64::from(*v);
                }
                row[ci] = (acc / (h * w) as f64) as f32;
            }
        });
    y
}

/// Gradient of [`global_avg_pool`].
pub fn global_avg_pool_backward(dy: ArrayView2<'_, f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c) = dy.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(dy.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut img, row)| {
            for ci in 0..c {
                let g = row[ci] * scale;
                img.index_axis_mut(Axis(0), ci).fill(g);
            }
        });
    dx
}

/// Max pooling; returns the pooled map and flat argmax indices for backward.
pub fn max_pool(
    x: &Array4<f32>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Array4<f32>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    let mut y = Array4::<f32>::zeros((n, c, oh, ow));
    let mut idx = vec![0u32; n * c * oh * ow];

    let chunks: Vec<(usize, Vec<u32>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut local = vec![0u32; c * oh * ow];
            let img = x.index_axis(Axis(0), ni);
            let mut out = unsafe {
                // SAFETY: each ni writes a disjoint slab of y.
                let ptr = y.as_ptr() as *mut f32;
                std::slice::from_raw_parts_mut(ptr.add(ni * c * oh * ow), c * oh * ow)
            };
            pool_one(&img, kernel, stride, padding, &mut out, &mut local);
            (ni, local)
        })
        .collect();
    for (ni, local) in chunks {
        idx[ni * c * oh * ow..(ni + 1) * c * oh * ow].copy_from_slice(&local);
    }
    (y, idx)
}

fn pool_one(
    img: &ArrayView3<'_, f32>,
    kernel: usize,
    stride: usize,
    padding: usize,
    out: &mut [f32],
    idx: &mut [u32],
) {
    let (c, h, w) = img.dim();
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    let xs = img.as_slice().expect("contiguous");
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0u32;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = plane[iy as usize * w + ix as usize];
                        if v > best {
                            best = v;
                            best_at = (iy as usize * w + ix as usize) as u32;
                        }
                    }
                }
                out[ci * oh * ow + oy * ow + ox] = best;
                idx[ci * oh * ow + oy * ow + ox] = best_at;
            }
        }
    }
}

/// Gradient of [`max_pool`].
pub fn max_pool_backward(
    dy: &Array4<f32>,
    idx: &[u32],
    input_dim: (usize, usize, usize, usize),
) -> Array4<f32> {
    let (n, c, h, w) = input_dim;
    let (_, _, oh, ow) = dy.dim();
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(dy.axis_iter(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(ni, (mut dimg, gimg))| {
            let ds = dimg.as_slice_mut().expect("contiguous");
            let gs = gimg.as_slice().expect("contiguous");
            let base = ni * c * oh * ow;
            for ci in 0..c {
                for p in 0..oh * ow {
                    let at = idx[base + ci * oh * ow + p] as usize;
                    ds[ci * h * w + at] += gs[ci * oh * ow + p];
                }
            }
        });
    dx
}

/// Row argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy over logits `(N, K)`.
///
/// Returns `(mean loss, dloss/dlogits, correct top-1 count)`. The gradient is
/// already divided by the batch size.
pub fn softmax_cross_entropy(
    logits: &Array2<f32>,
    labels: &[u32],
) -> (f64, Array2<f32>, usize) {
    let (n, _k) = logits.dim();
    assert_eq!(n, labels.len(), "label count must match batch size");
    let mut dlogits = logits.clone();
    let losses: Vec<(f64, bool)> = dlogits
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(i, mut row)| {
            let slice = row.as_slice_mut().expect("contiguous");
            let y = labels[i] as usize;
            let correct = argmax_row(slice) == y;
            let m = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for v in slice.iter() {
                denom += f64::from(v - m).exp();
            }
            let loss = denom.ln() - f64::from(slice[y] - m);
            let inv_n = 1.0 / n as f64;
            for (j, v) in slice.iter_mut().enumerate() {
                let p = f64::from(*v - m).exp() / denom;
                let t = if j == y { 1.0 } else { 0.0 };
                *v = ((p - t) * inv_n) as f32;
            }
            (loss, correct)
        })
        .collect();
    let mut total = 0.0f64;
    let mut correct = 0usize;
    for (l, c) in losses {
        total += l;
        correct += usize::from(c);
    }
    (total / n as f64, dlogits, correct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    fn naive_conv(
        x: &Array4<f32>,
        w: &Array4<f32>,
        stride: usize,
        padding: usize,
    ) -> Array4<f32> {
        let (n, c, h, wd) = x.dim();
        let (oc, _, kh, kw) = w.dim();
        let oh = conv_out_dim(h, kh, stride, padding);
        let ow = conv_out_dim(wd, kw, stride, padding);
        let mut y = Array4::<f32>::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[(ni, ci, iy as usize, ix as usize)]
                                            * w[(o, ci, ky, kx)];
                                    }
                                }
                            }
                        }
                        y[(ni, o, oy, ox)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_matches_naive_conv() {
        use crate::nn::Conv2d;
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::Init);
        for &(stride, padding) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let conv = Conv2d::randn(4, 3, 3, stride, padding, false, &mut rng);
            let x = Array4::from_shape_fn((2, 3, 7, 7), |_| {
                use rand::Rng;
                rng.gen_range(-1.0..1.0)
            });
            let y = conv.forward(&x);
            let want = naive_conv(&x, &conv.weight, stride, padding);
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b} (s={stride}, p={padding})");
            }
        }
    }

    #[test]
    fn col2im_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let mut rng = crate::rng::stream_rng(2, crate::rng::Stream::Init);
        use rand::Rng;
        let x = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-1.0f32..1.0));
        let rows = 2 * 9;
        let cols = conv_out_dim(5, 3, 2, 1).pow(2);
        let c: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut colx = vec![0.0f32; rows * cols];
        im2col(x.view(), 3, 2, 1, &mut colx);
        let lhs: f64 = colx.iter().zip(&c).map(|(a, b)| f64::from(a * b)).sum();
        let mut back = Array3::<f32>::zeros((2, 5, 5));
        col2im(&c, 3, 2, 1, back.view_mut());
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| f64::from(a * b)).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_row(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax_row(&[1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn relu_guided_gates_on_both_signs() {
        let y = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 0.0, 2.0, 3.0]).unwrap();
        let dy = Array4::from_shape_vec((1, 1, 2, 2), vec![-1.0, 5.0, 2.0, -3.0]).unwrap();
        let std = relu_backward(&y, &dy, ReluRule::Standard);
        assert_eq!(std.as_slice().unwrap(), &[-1.0, 0.0, 2.0, -3.0]);
        let guided = relu_backward(&y, &dy, ReluRule::Guided);
        assert_eq!(guided.as_slice().unwrap(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = arr2(&[[0.3f32, -0.2, 0.9], [-1.0, 0.4, 0.1]]);
        let labels = [2u32, 0];
        let (_, grad, _) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-3f32;
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = logits.clone();
                lp[(i, j)] += h;
                let mut lm = logits.clone();
                lm[(i, j)] -= h;
                let (fp, _, _) = softmax_cross_entropy(&lp, &labels);
                let (fm, _, _) = softmax_cross_entropy(&lm, &labels);
                let fd = ((fp - fm) / (2.0 * f64::from(h))) as f32;
                assert!(
                    (fd - grad[(i, j)]).abs() < 2e-3,
                    "fd {fd} vs analytic {}",
                    grad[(i, j)]
                );
            }
        }
    }

    #[test]
    fn pooling_roundtrip_shapes() {
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(n, c, h, w)| {
            (n * 1000 + c * 100 + h * 10 + w) as f32
        });
        let (y, idx) = max_pool(&x, 3, 2, 1);
        assert_eq!(y.dim(), (2, 3, 4, 4));
        let dx = max_pool_backward(&y, &idx, x.dim());
        assert_eq!(dx.dim(), x.dim());
        // Every pooled gradient lands somewhere.
        let total: f32 = dx.sum();
        let expect: f32 = y.sum();
        assert!((total - expect).abs() < 1e-3);
    }

    #[test]
    fn global_pool_is_mean() {
        let x = Array4::from_shape_vec((1, 2, 2, 2), vec![1., 2., 3., 4., 10., 10., 10., 10.])
            .unwrap();
        let y = global_avg_pool(&x);
        assert!((y[(0, 0)] - 2.5).abs() < 1e-6);
        assert!((y[(0, 1)] - 10.0).abs() < 1e-6);
    }
}
