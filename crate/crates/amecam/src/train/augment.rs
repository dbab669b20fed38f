//! Stochastic views for contrastive pretraining: random horizontal flip,
//! random crop-and-resize, and intensity jitter. Values stay inside `[0,1]`
//! and the output keeps the input shape.

use crate::nn::ops;
use crate::Scalar;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// One augmented view of a normalized slice.
pub fn augment_view<T: Scalar>(image: &Array2<T>, rng: &mut ChaCha20Rng) -> Array2<T> {
    let (h, w) = image.dim();
    let mut view = image.clone();

    if rng.gen::<f64>() < 0.5 {
        view = flip_horizontal(&view);
    }

    // Crop a random window covering 70-100% of each side, then stretch back.
    let scale = uniform(rng, 0.7, 1.0);
    let ch = ((h as f64 * scale).round() as usize).clamp(2, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(2, w);
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    if (ch, cw) != (h, w) {
        let crop = view.slice(ndarray::s![top..top + ch, left..left + cw]).to_owned();
        view = ops::bilinear_resize2d(&crop, h, w);
    }

    let gain = T::from_f64_(uniform(rng, 0.9, 1.1));
    let bias = T::from_f64_(uniform(rng, -0.05, 0.05));
    view.mapv_inplace(|v| (v * gain + bias).max(T::zero()).min(T::one()));
    view
}

pub fn flip_horizontal<T: Scalar>(image: &Array2<T>) -> Array2<T> {
    let (h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(r, c)| image[[r, w - 1 - c]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_image() -> Array2<f64> {
        Array2::from_shape_fn((16, 16), |(r, c)| ((r * 16 + c) as f64) / 255.0)
    }

    #[test]
    fn same_seed_gives_the_same_view() {
        let img = sample_image();
        let a = augment_view(&img, &mut ChaCha20Rng::seed_from_u64(9));
        let b = augment_view(&img, &mut ChaCha20Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn different_draws_give_different_views() {
        let img = sample_image();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let a = augment_view(&img, &mut rng);
        let b = augment_view(&img, &mut rng);
        assert!(a != b);
    }

    #[test]
    fn views_keep_shape_and_range() {
        let img = sample_image();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for _ in 0..20 {
            let v = augment_view(&img, &mut rng);
            assert_eq!(v.dim(), (16, 16));
            assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let img = sample_image();
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = Array2::from_shape_fn((1, 3), |(_, c)| c as f64);
        let flipped = flip_horizontal(&img);
        assert_eq!(flipped, ndarray::arr2(&[[2.0, 1.0, 0.0]]));
    }
}
