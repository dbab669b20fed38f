//! Qualitative panels: the grayscale slice with an activation map blended in
//! a fixed highlight color and, when a ground-truth mask is given, its
//! contour traced on top. Same inputs always produce byte-identical PNGs.

use crate::eval::boundary_pixels;
use crate::{Error, Result, Scalar};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use std::path::Path;

/// Highlight color for activation (an orange that reads over gray).
const HIGHLIGHT: [f64; 3] = [255.0, 96.0, 0.0];
/// Contour color for ground-truth masks.
const CONTOUR: Rgb<u8> = Rgb([0, 255, 70]);
/// Peak opacity of the activation blend.
const MAX_ALPHA: f64 = 0.6;

/// Renders `image` (values in `[0,1]`) to `out_path` as a PNG, blending
/// `map` and tracing the contour of `mask` when given.
pub fn render_overlay<T: Scalar>(
    image: &Array2<T>,
    map: Option<&Array2<T>>,
    mask: Option<&Array2<u8>>,
    out_path: &Path,
) -> Result<()> {
    let (h, w) = image.dim();
    if let Some(m) = map {
        if m.dim() != (h, w) {
            return Err(Error::ShapeMismatch { expected: vec![h, w], got: m.shape().to_vec() });
        }
    }
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(Error::ShapeMismatch { expected: vec![h, w], got: m.shape().to_vec() });
        }
    }

    let mut png = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let gray = (image[[r, c]].to_f64_().clamp(0.0, 1.0) * 255.0).round();
            let alpha = map
                .map(|m| m[[r, c]].to_f64_().clamp(0.0, 1.0) * MAX_ALPHA)
                .unwrap_or(0.0);
            let px = [0, 1, 2].map(|i| {
                ((1.0 - alpha) * gray + alpha * HIGHLIGHT[i]).round().clamp(0.0, 255.0) as u8
            });
            png.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    if let Some(m) = mask {
        for (r, c) in boundary_pixels(m) {
            png.put_pixel(c as u32, r as u32, CONTOUR);
        }
    }

    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() && std::fs::create_dir_all(parent).is_err() {
            return Err(Error::UnwritablePath(out_path.to_path_buf()));
        }
    }
    png.save(out_path).map_err(|_| Error::UnwritablePath(out_path.to_path_buf()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> Array2<f32> {
        Array2::from_shape_fn((8, 10), |(r, c)| (r * 10 + c) as f32 / 79.0)
    }

    #[test]
    fn zero_map_renders_exactly_the_grayscale_image() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image();
        let plain = dir.path().join("plain.png");
        let zeroed = dir.path().join("zeroed.png");
        render_overlay(&img, None, None, &plain).unwrap();
        let zero_map = Array2::<f32>::zeros((8, 10));
        render_overlay(&img, Some(&zero_map), Some(&Array2::zeros((8, 10))), &zeroed).unwrap();
        assert_eq!(std::fs::read(&plain).unwrap(), std::fs::read(&zeroed).unwrap());
    }

    #[test]
    fn output_dimensions_match_the_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.png");
        render_overlay(&gradient_image(), None, None, &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 10);
        assert_eq!(img.height(), 8);
    }

    #[test]
    fn same_inputs_give_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image();
        let map = Array2::from_shape_fn((8, 10), |(r, _)| r as f32 / 7.0);
        let mut mask = Array2::<u8>::zeros((8, 10));
        mask[[4, 4]] = 1;
        mask[[4, 5]] = 1;
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        render_overlay(&img, Some(&map), Some(&mask), &a).unwrap();
        render_overlay(&img, Some(&map), Some(&mask), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn activation_tints_toward_the_highlight_color() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hot.png");
        let img = Array2::<f32>::zeros((4, 4));
        let map = Array2::<f32>::ones((4, 4));
        render_overlay(&img, Some(&map), None, &path).unwrap();
        let png = image::open(&path).unwrap().to_rgb8();
        let px = png.get_pixel(0, 0);
        assert!(px[0] > px[2], "red channel should dominate: {px:?}");
        assert_eq!(px[0], (0.6f64 * 255.0).round() as u8);
    }

    #[test]
    fn mask_contour_is_drawn() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("contour.png");
        let img = Array2::<f32>::zeros((8, 8));
        let mut mask = Array2::<u8>::zeros((8, 8));
        for r in 2..6 {
            for c in 2..6 {
                mask[[r, c]] = 1;
            }
        }
        render_overlay(&img, None, Some(&mask), &path).unwrap();
        let png = image::open(&path).unwrap().to_rgb8();
        assert_eq!(*png.get_pixel(2, 2), CONTOUR, "border pixel is contour");
        assert_eq!(*png.get_pixel(3, 3), Rgb([0, 0, 0]), "interior is untouched");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient_image();
        let bad = Array2::<f32>::zeros((4, 4));
        let err = render_overlay(&img, Some(&bad), None, &dir.path().join("x.png"));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn unwritable_destination_is_reported() {
        let img = gradient_image();
        let err = render_overlay(&img, None, None, Path::new("/proc/definitely/not/writable.png"));
        assert!(matches!(err, Err(Error::UnwritablePath(_))));
    }
}
