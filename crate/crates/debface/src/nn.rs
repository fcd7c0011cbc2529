//! Minimal dense/convolution layers with explicit backward passes.
//!
//! Everything is f64 and single-threaded so training runs are
//! bit-reproducible. Batches are row-major: dense activations are
//! `(n, features)`, images are `(n, c, h, w)`.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fully-connected layer, `w: (out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    /// He-uniform initialization.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let mut w = Array2::zeros((out_dim, in_dim));
        for v in w.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// `x: (n, in) -> (n, out)`
    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn forward1(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    /// Returns (parameter gradients, gradient w.r.t. x).
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        d_out: &ArrayView2<f64>,
    ) -> (LinearGrad, Array2<f64>) {
        let d_w = d_out.t().dot(x);
        let d_b = d_out.sum_axis(Axis(0));
        let d_x = d_out.dot(&self.w);
        (LinearGrad { w: d_w, b: d_b }, d_x)
    }

    /// Gradient w.r.t. x only; used where the layer is held constant.
    pub fn backward_input(&self, d_out: &ArrayView2<f64>) -> Array2<f64> {
        d_out.dot(&self.w)
    }

    pub fn zero_grad(&self) -> LinearGrad {
        LinearGrad {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

/// 3x3 convolution, padding 1, configurable stride, via im2col.
/// `w: (out_ch, in_ch * 9)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

pub const KERNEL: usize = 3;
pub const PAD: usize = 1;

impl ConvLayer {
    pub fn init(out_ch: usize, in_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * KERNEL * KERNEL;
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut w = Array2::zeros((out_ch, fan_in));
        for v in w.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Self {
            w,
            b: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            stride,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * PAD - KERNEL) / self.stride + 1,
            (w + 2 * PAD - KERNEL) / self.stride + 1,
        )
    }

    /// `x: (n, in_ch, h, w)`; returns (output, im2col matrix kept for backward).
    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.stride);
        // (n*oh*ow, in_ch*9) x (in_ch*9, out_ch)
        let flat = cols.dot(&self.w.t()) + &self.b;
        let mut out = Array4::zeros((n, self.out_ch, oh, ow));
        for i in 0..n {
            for oc in 0..self.out_ch {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[[i, oc, y, xx]] = flat[[(i * oh + y) * ow + xx, oc]];
                    }
                }
            }
        }
        (out, cols)
    }

    pub fn backward(
        &self,
        cols: &Array2<f64>,
        in_shape: (usize, usize, usize, usize),
        d_out: &Array4<f64>,
    ) -> (ConvGrad, Array4<f64>) {
        let (n, _c, h, w) = in_shape;
        let (_, oc, oh, ow) = d_out.dim();
        let mut d_flat = Array2::zeros((n * oh * ow, oc));
        for i in 0..n {
            for o in 0..oc {
                for y in 0..oh {
                    for xx in 0..ow {
                        d_flat[[(i * oh + y) * ow + xx, o]] = d_out[[i, o, y, xx]];
                    }
                }
            }
        }
        let d_w = d_flat.t().dot(cols);
        let d_b = d_flat.sum_axis(Axis(0));
        let d_cols = d_flat.dot(&self.w);
        let d_x = col2im(&d_cols, (n, self.in_ch, h, w), self.stride);
        (ConvGrad { w: d_w, b: d_b }, d_x)
    }
}

/// Unfold 3x3/pad-1 patches: output row `(i*oh + y)*ow + x`, column
/// `c*9 + ky*3 + kx`.
pub fn im2col(x: &Array4<f64>, stride: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * PAD - KERNEL) / stride + 1;
    let ow = (w + 2 * PAD - KERNEL) / stride + 1;
    let mut cols = Array2::zeros((n * oh * ow, c * KERNEL * KERNEL));
    for i in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let row = (i * oh + y) * ow + xx;
                for ch in 0..c {
                    for ky in 0..KERNEL {
                        let sy = (y * stride + ky) as isize - PAD as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let sx = (xx * stride + kx) as isize - PAD as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            cols[[row, ch * 9 + ky * 3 + kx]] =
                                x[[i, ch, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter column gradients back onto the image.
pub fn col2im(
    d_cols: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    stride: usize,
) -> Array4<f64> {
    let (n, c, h, w) = shape;
    let oh = (h + 2 * PAD - KERNEL) / stride + 1;
    let ow = (w + 2 * PAD - KERNEL) / stride + 1;
    let mut x = Array4::zeros(shape);
    for i in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let row = (i * oh + y) * ow + xx;
                for ch in 0..c {
                    for ky in 0..KERNEL {
                        let sy = (y * stride + ky) as isize - PAD as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..KERNEL {
                            let sx = (xx * stride + kx) as isize - PAD as isize;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            x[[i, ch, sy as usize, sx as usize]] +=
                                d_cols[[row, ch * 9 + ky * 3 + kx]];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn relu_inplace4(x: &mut Array4<f64>) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn relu_inplace2(x: &mut Array2<f64>) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Mask gradient by the sign of the pre-activation.
pub fn relu_backward4(pre: &Array4<f64>, d: &mut Array4<f64>) {
    for (p, g) in pre.iter().zip(d.iter_mut()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn relu_backward2(pre: &Array2<f64>, d: &mut Array2<f64>) {
    for (p, g) in pre.iter().zip(d.iter_mut()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array4;

    /// Finite-difference check of the conv backward pass.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = stream(1, "convtest", &[]);
        let layer = ConvLayer::init(2, 3, 2, &mut rng);
        let mut x = Array4::zeros((2, 3, 6, 6));
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let (out, cols) = layer.forward(&x);
        // Scalar objective: sum of squares of outputs.
        let d_out = out.mapv(|v| 2.0 * v);
        let (grads, d_x) = layer.backward(&cols, x.dim(), &d_out);
        let f = |layer: &ConvLayer, x: &Array4<f64>| -> f64 {
            let (o, _) = layer.forward(x);
            o.iter().map(|v| v * v).sum()
        };
        let eps = 1e-5;
        // Spot-check a few weight coordinates.
        for &(i, j) in &[(0, 0), (1, 5), (0, 13), (1, 26)] {
            let mut lp = layer.clone();
            lp.w[[i, j]] += eps;
            let mut lm = layer.clone();
            lm.w[[i, j]] -= eps;
            let num = (f(&lp, &x) - f(&lm, &x)) / (2.0 * eps);
            assert!(
                (num - grads.w[[i, j]]).abs() / num.abs().max(1.0) < 1e-6,
                "weight grad mismatch at ({i},{j}): {num} vs {}",
                grads.w[[i, j]]
            );
        }
        // And a few input coordinates.
        for &(i, c, y, xx) in &[(0, 0, 0, 0), (1, 2, 3, 4), (0, 1, 5, 5)] {
            let mut xp = x.clone();
            xp[[i, c, y, xx]] += eps;
            let mut xm = x.clone();
            xm[[i, c, y, xx]] -= eps;
            let num = (f(&layer, &xp) - f(&layer, &xm)) / (2.0 * eps);
            assert!(
                (num - d_x[[i, c, y, xx]]).abs() / num.abs().max(1.0) < 1e-6,
                "input grad mismatch"
            );
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = stream(2, "lintest", &[]);
        let layer = Linear::init(4, 5, &mut rng);
        let mut x = Array2::zeros((3, 5));
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let out = layer.forward(&x.view());
        let d_out = out.mapv(|v| 2.0 * v);
        let (grads, d_x) = layer.backward(&x.view(), &d_out.view());
        let f = |l: &Linear, x: &Array2<f64>| -> f64 {
            l.forward(&x.view()).iter().map(|v| v * v).sum()
        };
        let eps = 1e-6;
        for &(i, j) in &[(0, 0), (3, 4), (2, 1)] {
            let mut lp = layer.clone();
            lp.w[[i, j]] += eps;
            let mut lm = layer.clone();
            lm.w[[i, j]] -= eps;
            let num = (f(&lp, &x) - f(&lm, &x)) / (2.0 * eps);
            assert!((num - grads.w[[i, j]]).abs() / num.abs().max(1.0) < 1e-5);
        }
        let mut xp = x.clone();
        xp[[1, 2]] += eps;
        let mut xm = x.clone();
        xm[[1, 2]] -= eps;
        let num = (f(&layer, &xp) - f(&layer, &xm)) / (2.0 * eps);
        assert!((num - d_x[[1, 2]]).abs() / num.abs().max(1.0) < 1e-5);
    }
}
