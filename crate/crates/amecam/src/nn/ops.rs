//! Stateless differentiable operations shared by the network, the CAM
//! machinery and the aggregation head.

use crate::Scalar;
use ndarray::{Array1, Array2, Array3, Array4, Axis};

/// Elementwise `max(x, 0)`.
pub fn relu<T: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks the upstream gradient where the forward output was zero.
pub fn relu_backward<T: Scalar, D: ndarray::Dimension>(
    y: &ndarray::Array<T, D>,
    grad_y: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut dx = grad_y.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// Global average pooling: `[N, C, H, W]` -> `[N, C]`.
pub fn gap<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let area = T::from_f64_((h * w) as f64);
    let mut y = Array2::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let mut acc = T::zero();
            for r in 0..h {
                for col in 0..w {
                    acc += x[[i, ch, r, col]];
                }
            }
            y[[i, ch]] = acc / area;
        }
    }
    y
}

/// Spreads `dL/dy` uniformly back over each pooled window.
pub fn gap_backward<T: Scalar>(
    grad_y: &Array2<T>,
    h: usize,
    w: usize,
) -> Array4<T> {
    let (n, c) = grad_y.dim();
    let area = T::from_f64_((h * w) as f64);
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let g = grad_y[[i, ch]] / area;
            for r in 0..h {
                for col in 0..w {
                    dx[[i, ch, r, col]] = g;
                }
            }
        }
    }
    dx
}

/// Numerically stable row softmax.
pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut p = logits.clone();
    for mut row in p.outer_iter_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().cloned().fold(T::zero(), |a, b| a + b);
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Mean softmax cross entropy over the batch.
///
/// Returns the scalar loss and `dL/dlogits` (already scaled by `1/N`).
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Array2<T>,
    labels: &[usize],
) -> (T, Array2<T>) {
    let n = logits.nrows();
    assert_eq!(labels.len(), n, "one label per row");
    let inv_n = T::from_f64_(1.0 / n as f64);
    let probs = softmax_rows(logits);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(T::from_f64_(f64::MIN_POSITIVE)).ln();
        grad[[i, y]] -= T::one();
    }
    grad.mapv_inplace(|v| v * inv_n);
    (loss * inv_n, grad)
}

/// L2-normalizes each row to unit norm.
pub fn normalize_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut z = x.clone();
    for mut row in z.outer_iter_mut() {
        let norm = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b).sqrt();
        if norm > T::zero() {
            row.mapv_inplace(|v| v / norm);
        }
    }
    z
}

/// Backward of [`normalize_rows`]: `dx = (dz - z * (z . dz)) / norm`.
pub fn normalize_rows_backward<T: Scalar>(
    x: &Array2<T>,
    grad_z: &Array2<T>,
) -> Array2<T> {
    let mut dx = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let row = x.row(i);
        let norm = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b).sqrt();
        if norm <= T::zero() {
            continue;
        }
        let z: Array1<T> = row.mapv(|v| v / norm);
        let dz = grad_z.row(i);
        let dot = z
            .iter()
            .zip(dz.iter())
            .map(|(&a, &b)| a * b)
            .fold(T::zero(), |a, b| a + b);
        for j in 0..x.ncols() {
            dx[[i, j]] = (dz[j] - z[j] * dot) / norm;
        }
    }
    dx
}

/// Source and target index/weight pairs for one corner-aligned axis.
///
/// With a single output sample the map degenerates to the first input sample.
fn align_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let mut table = Vec::with_capacity(out_len);
    let scale = if out_len > 1 {
        (in_len - 1) as f64 / (out_len - 1) as f64
    } else {
        0.0
    };
    for i in 0..out_len {
        let src = i as f64 * scale;
        let lo = src.floor() as usize;
        let lo = lo.min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        table.push((lo, hi, frac));
    }
    table
}

/// Corner-aligned bilinear resize of a single map `[H, W]` -> `[H2, W2]`.
///
/// Corner pixels map exactly onto corner pixels, and resizing to the input
/// size reproduces the input bit for bit.
pub fn bilinear_resize2d<T: Scalar>(
    x: &Array2<T>,
    out_h: usize,
    out_w: usize,
) -> Array2<T> {
    let (h, w) = x.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "empty resize");
    let rows = align_axis(h, out_h);
    let cols = align_axis(w, out_w);
    let mut y = Array2::zeros((out_h, out_w));
    for (oi, &(r0, r1, fy)) in rows.iter().enumerate() {
        let fy = T::from_f64_(fy);
        let gy = T::one() - fy;
        for (oj, &(c0, c1, fx)) in cols.iter().enumerate() {
            let fx = T::from_f64_(fx);
            let gx = T::one() - fx;
            y[[oi, oj]] = gy * gx * x[[r0, c0]]
                + gy * fx * x[[r0, c1]]
                + fy * gx * x[[r1, c0]]
                + fy * fx * x[[r1, c1]];
        }
    }
    y
}

/// Backward of [`bilinear_resize2d`]: scatters with the forward weights.
pub fn bilinear_resize2d_backward<T: Scalar>(
    grad_y: &Array2<T>,
    in_h: usize,
    in_w: usize,
) -> Array2<T> {
    let (out_h, out_w) = grad_y.dim();
    let rows = align_axis(in_h, out_h);
    let cols = align_axis(in_w, out_w);
    let mut dx = Array2::zeros((in_h, in_w));
    for (oi, &(r0, r1, fy)) in rows.iter().enumerate() {
        let fy = T::from_f64_(fy);
        let gy = T::one() - fy;
        for (oj, &(c0, c1, fx)) in cols.iter().enumerate() {
            let fx = T::from_f64_(fx);
            let gx = T::one() - fx;
            let g = grad_y[[oi, oj]];
            dx[[r0, c0]] += gy * gx * g;
            dx[[r0, c1]] += gy * fx * g;
            dx[[r1, c0]] += fy * gx * g;
            dx[[r1, c1]] += fy * fx * g;
        }
    }
    dx
}

/// Resizes every channel of `[C, H, W]` with [`bilinear_resize2d`].
pub fn bilinear_resize_channels<T: Scalar>(
    x: &Array3<T>,
    out_h: usize,
    out_w: usize,
) -> Array3<T> {
    let (c, _, _) = x.dim();
    let mut y = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = bilinear_resize2d(&x.index_axis(Axis(0), ch).to_owned(), out_h, out_w);
        y.index_axis_mut(Axis(0), ch).assign(&plane);
    }
    y
}

/// Channelwise backward of [`bilinear_resize_channels`].
pub fn bilinear_resize_channels_backward<T: Scalar>(
    grad_y: &Array3<T>,
    in_h: usize,
    in_w: usize,
) -> Array3<T> {
    let (c, _, _) = grad_y.dim();
    let mut dx = Array3::zeros((c, in_h, in_w));
    for ch in 0..c {
        let plane =
            bilinear_resize2d_backward(&grad_y.index_axis(Axis(0), ch).to_owned(), in_h, in_w);
        dx.index_axis_mut(Axis(0), ch).assign(&plane);
    }
    dx
}

/// Softmax across the channel axis of `[K, H, W]`, independently per pixel.
pub fn pixel_softmax<T: Scalar>(logits: &Array3<T>) -> Array3<T> {
    let (k, h, w) = logits.dim();
    let mut out = Array3::zeros((k, h, w));
    for r in 0..h {
        for c in 0..w {
            let mut max = T::neg_infinity();
            for ch in 0..k {
                max = max.max(logits[[ch, r, c]]);
            }
            let mut sum = T::zero();
            for ch in 0..k {
                let e = (logits[[ch, r, c]] - max).exp();
                out[[ch, r, c]] = e;
                sum += e;
            }
            for ch in 0..k {
                out[[ch, r, c]] /= sum;
            }
        }
    }
    out
}

/// Backward of [`pixel_softmax`]: `dl_k = w_k * (dw_k - sum_j dw_j * w_j)`.
pub fn pixel_softmax_backward<T: Scalar>(
    weights: &Array3<T>,
    grad_w: &Array3<T>,
) -> Array3<T> {
    let (k, h, w) = weights.dim();
    let mut dl = Array3::zeros((k, h, w));
    for r in 0..h {
        for c in 0..w {
            let mut dot = T::zero();
            for ch in 0..k {
                dot += grad_w[[ch, r, c]] * weights[[ch, r, c]];
            }
            for ch in 0..k {
                dl[[ch, r, c]] = weights[[ch, r, c]] * (grad_w[[ch, r, c]] - dot);
            }
        }
    }
    dl
}

/// L2-normalizes the channel vector at every pixel of `[C, H, W]`.
///
/// Pixels whose channel vector has norm below `eps` are left at zero.
pub fn pixel_l2_normalize<T: Scalar>(x: &Array3<T>, eps: T) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut z = Array3::zeros((c, h, w));
    for r in 0..h {
        for col in 0..w {
            let mut sq = T::zero();
            for ch in 0..c {
                sq += x[[ch, r, col]] * x[[ch, r, col]];
            }
            let norm = sq.sqrt();
            if norm > eps {
                for ch in 0..c {
                    z[[ch, r, col]] = x[[ch, r, col]] / norm;
                }
            }
        }
    }
    z
}

/// Backward of [`pixel_l2_normalize`].
pub fn pixel_l2_normalize_backward<T: Scalar>(
    x: &Array3<T>,
    grad_z: &Array3<T>,
    eps: T,
) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut dx = Array3::zeros((c, h, w));
    for r in 0..h {
        for col in 0..w {
            let mut sq = T::zero();
            for ch in 0..c {
                sq += x[[ch, r, col]] * x[[ch, r, col]];
            }
            let norm = sq.sqrt();
            if norm <= eps {
                continue;
            }
            let mut dot = T::zero();
            for ch in 0..c {
                dot += (x[[ch, r, col]] / norm) * grad_z[[ch, r, col]];
            }
            for ch in 0..c {
                let z = x[[ch, r, col]] / norm;
                dx[[ch, r, col]] = (grad_z[[ch, r, col]] - z * dot) / norm;
            }
        }
    }
    dx
}
