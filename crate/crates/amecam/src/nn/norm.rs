//! Batch normalization over `[N, C, H, W]`.

use super::{init, join, Layer, Param};
use crate::Scalar;
use ndarray::{Array1, Array4, ArrayD, Axis, Ix1};

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub eps: T,
    /// Fraction of the batch statistic blended into the running estimate.
    pub momentum: T,
    pub channels: usize,
}

/// Forward-pass cache for the training-mode backward.
pub struct BnCache<T> {
    pub xhat: Array4<T>,
    pub invstd: Array1<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(init::ones(&[channels])),
            beta: Param::new(init::zeros(&[channels])),
            running_mean: init::zeros(&[channels]),
            running_var: init::ones(&[channels]),
            eps: T::from_f64_(1e-5),
            momentum: T::from_f64_(0.1),
            channels,
        }
    }

    /// Training mode: normalize with batch statistics (biased variance) and
    /// update the running estimates.
    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let m = T::from_f64_((n * h * w) as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();

        let mut xhat = Array4::zeros((n, c, h, w));
        let mut y = Array4::zeros((n, c, h, w));
        let mut invstd = Array1::zeros(c);
        for ch in 0..c {
            let lane = x.index_axis(Axis(1), ch);
            let mean = lane.iter().copied().sum::<T>() / m;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let istd = T::one() / (var + self.eps).sqrt();
            invstd[ch] = istd;
            let (g, b) = (gamma[ch], beta[ch]);
            let mut xh = xhat.index_axis_mut(Axis(1), ch);
            let mut yo = y.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut xh).and(&mut yo).and(&lane).for_each(|xh, yo, &v| {
                let t = (v - mean) * istd;
                *xh = t;
                *yo = g * t + b;
            });
            let keep = T::one() - self.momentum;
            self.running_mean[ch] = keep * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = keep * self.running_var[ch] + self.momentum * var;
        }
        (y, BnCache { xhat, invstd })
    }

    /// Inference mode: normalize with the running statistics.
    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let (_, c, _, _) = x.dim();
        debug_assert_eq!(c, self.channels);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.clone();
        for ch in 0..c {
            let mean = self.running_mean[ch];
            let istd = T::one() / (self.running_var[ch] + self.eps).sqrt();
            let (g, b) = (gamma[ch], beta[ch]);
            y.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| g * (v - mean) * istd + b);
        }
        y
    }

    /// Training-mode backward; accumulates gamma/beta gradients.
    pub fn backward(&mut self, cache: &BnCache<T>, grad_y: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = grad_y.dim();
        let m = T::from_f64_((n * h * w) as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        let mut dx = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let dy = grad_y.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            ndarray::Zip::from(&dy).and(&xh).for_each(|&d, &x| {
                sum_dy += d;
                sum_dy_xh += d * x;
            });
            dgamma[ch] = sum_dy_xh;
            dbeta[ch] = sum_dy;
            let g = gamma[ch];
            let istd = cache.invstd[ch];
            let scale = g * istd / m;
            let mut dxo = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dxo).and(&dy).and(&xh).for_each(|o, &d, &x| {
                *o = scale * (m * d - sum_dy - x * sum_dy_xh);
            });
        }
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();
        dx
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn train_forward_normalizes_batch() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = Array4::from_shape_fn((3, 2, 4, 4), |_| rng.gen_range(-2.0..2.0));
        let (y, _) = bn.forward_train(&x);
        for ch in 0..2 {
            let lane = y.index_axis(Axis(1), ch);
            let m = lane.iter().sum::<f64>() / lane.len() as f64;
            let v = lane.iter().map(|&t| (t - m).powi(2)).sum::<f64>() / lane.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4); // off by eps/(var+eps)
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.gen_range(-1.0..1.0f64));
        // weight the output so the objective is not symmetric
        let wobj = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.gen_range(-1.0..1.0f64));
        let objective = |bn: &mut BatchNorm2d<f64>, x: &Array4<f64>| {
            let snapshot = (bn.running_mean.clone(), bn.running_var.clone());
            let (y, _) = bn.forward_train(x);
            bn.running_mean = snapshot.0;
            bn.running_var = snapshot.1;
            (&y * &wobj).sum()
        };

        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value[[0]] = 1.3;
        bn.gamma.value[[1]] = 0.7;
        bn.beta.value[[0]] = -0.2;
        let (_, cache) = bn.forward_train(&x);
        let dx = bn.backward(&cache, &wobj);

        let h = 1e-6;
        for idx in [[0usize, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 0]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let up = objective(&mut bn, &xp);
            xp[idx] -= 2.0 * h;
            let down = objective(&mut bn, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "fd={fd} an={}", dx[idx]);
        }
    }
}
