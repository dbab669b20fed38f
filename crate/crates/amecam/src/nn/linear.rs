//! Fully connected layer.

use super::{init, join, Layer, Param};
use crate::Scalar;
use ndarray::{Array1, Array2, Axis, Ix1, Ix2};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `[out_features, in_features]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_features as f64).sqrt();
        Self {
            weight: Param::new(init::normal(rng, &[out_features, in_features], std)),
            bias: Param::new(init::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    /// `x: [N, in]` -> `[N, out]`
    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.outer_iter_mut() {
            row += &b;
        }
        y
    }

    /// Accumulates gradients; returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<T>, grad_y: &Array2<T>) -> Array2<T> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let gw = grad_y.t().dot(x);
        let gb: Array1<T> = grad_y.sum_axis(Axis(0));
        let dx = grad_y.dot(&w);
        self.weight.grad += &gw.into_dyn();
        self.bias.grad += &gb.into_dyn();
        dx
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn forward_is_affine() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut lin = Linear::<f64>::new(2, 2, &mut rng);
        lin.weight.value.assign(&array![[1.0, 2.0], [0.0, -1.0]].into_dyn());
        lin.bias.value.assign(&array![0.5, 0.0].into_dyn());
        let x = array![[1.0, 1.0]];
        let y = lin.forward(&x);
        assert_eq!(y, array![[3.5, -1.0]]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = array![[0.3, -0.2, 0.9], [1.2, 0.1, -0.4]];
        let dy = array![[1.0, -0.5], [0.25, 2.0]];
        let mut l = lin.clone();
        let dx = l.backward(&x, &dy);

        let h = 1e-7;
        for idx in [[0usize, 0], [1, 2]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let up = (&lin.forward(&xp) * &dy).sum();
            xp[idx] -= 2.0 * h;
            let down = (&lin.forward(&xp) * &dy).sum();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6);
        }
    }
}
