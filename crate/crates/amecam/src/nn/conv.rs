//! 2D convolution via im2col + matrix multiply.

use super::{init, join, Layer, Param};
use crate::Scalar;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Ix1, Ix2};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// Flattened kernel, `[out_ch, in_ch * ksize * ksize]`.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * ksize * ksize;
        let weight = Param::new(init::he_normal(rng, &[out_ch, fan_in], fan_in));
        let bias = bias.then(|| Param::new(init::zeros(&[out_ch])));
        Self { weight, bias, in_ch, out_ch, ksize, stride, pad }
    }

    /// Same, but with an all-zero kernel (used for attention logits so the
    /// initial field is exactly uniform).
    pub fn new_zeroed(in_ch: usize, out_ch: usize, ksize: usize, stride: usize, pad: usize, bias: bool) -> Self {
        let fan_in = in_ch * ksize * ksize;
        let weight = Param::new(init::zeros(&[out_ch, fan_in]));
        let bias = bias.then(|| Param::new(init::zeros(&[out_ch])));
        Self { weight, bias, in_ch, out_ch, ksize, stride, pad }
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.ksize) / self.stride + 1
    }

    /// `x: [N, in_ch, H, W]` -> `[N, out_ch, H', W']`.
    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c_in, h, w) = x.dim();
        debug_assert_eq!(c_in, self.in_ch);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let wmat = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = Array4::zeros((n, self.out_ch, oh, ow));
        for i in 0..n {
            let cols = im2col(x.index_axis(Axis(0), i), self.ksize, self.stride, self.pad, oh, ow);
            let mut out = wmat.dot(&cols);
            if let Some(b) = &self.bias {
                let bv = b.value.view().into_dimensionality::<Ix1>().unwrap();
                for (mut row, &bi) in out.outer_iter_mut().zip(bv.iter()) {
                    row.mapv_inplace(|v| v + bi);
                }
            }
            y.index_axis_mut(Axis(0), i)
                .assign(&out.into_shape_with_order((self.out_ch, oh, ow)).unwrap());
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// `x` must be the forward input.
    pub fn backward(&mut self, x: &Array4<T>, grad_y: &Array4<T>) -> Array4<T> {
        let (n, _, h, w) = x.dim();
        let (_, oc, oh, ow) = grad_y.dim();
        debug_assert_eq!(oc, self.out_ch);
        let wmat = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut gw: Array2<T> = Array2::zeros(wmat.raw_dim());
        let mut gb: Array1<T> = Array1::zeros(self.out_ch);
        let mut dx = Array4::zeros((n, self.in_ch, h, w));
        for i in 0..n {
            let cols = im2col(x.index_axis(Axis(0), i), self.ksize, self.stride, self.pad, oh, ow);
            let gy = grad_y
                .index_axis(Axis(0), i)
                .into_shape_with_order((self.out_ch, oh * ow))
                .unwrap();
            gw = gw + gy.dot(&cols.t());
            if self.bias.is_some() {
                gb = gb + gy.sum_axis(Axis(1));
            }
            let dcols = wmat.t().dot(&gy);
            col2im(
                &dcols.view(),
                &mut dx.index_axis_mut(Axis(0), i).into_dimensionality().unwrap(),
                self.ksize,
                self.stride,
                self.pad,
                oh,
                ow,
            );
        }
        self.weight.grad += &gw.into_dyn();
        if let Some(b) = &mut self.bias {
            b.grad += &gb.into_dyn();
        }
        dx
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Unfold one sample into `[in_ch * k * k, oh * ow]`; out-of-bounds taps are zero.
fn im2col<T: Scalar>(
    x: ArrayView3<T>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::zeros((c_in * k * k, oh * ow));
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Transpose of [`im2col`]: scatter-add columns back onto the input grid.
fn col2im<T: Scalar>(
    cols: &ArrayView2<T>,
    dx: &mut ndarray::ArrayViewMut3<T>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c_in, h, w) = dx.dim();
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = cols.row(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Standalone single-image forward used by a few call sites that do not
/// carry a batch axis.
pub fn forward_single<T: Scalar>(conv: &Conv2d<T>, x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut batched = Array4::zeros((1, c, h, w));
    batched.index_axis_mut(Axis(0), 0).assign(x);
    let y = conv.forward(&batched);
    y.index_axis(Axis(0), 0).to_owned()
}
