//! Patch-relocation defects: a rectangle copied from one place in the image
//! and pasted at another.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3};

/// Deterministic paste of the `size = (ph, pw)` rectangle at `src` onto
/// `dst`. Returns the altered image and the mask marking the destination.
pub fn cutpaste_rect<S: Scalar>(
    base: &Array3<S>,
    src: (usize, usize),
    dst: (usize, usize),
    size: (usize, usize),
) -> Result<(Array3<S>, Array2<u8>)> {
    let (h, w, c) = base.dim();
    let (ph, pw) = size;
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(Error::argument(
            "size",
            format!("patch {ph}x{pw} does not fit a {h}x{w} image"),
        ));
    }
    if src.0 + ph > h || src.1 + pw > w || dst.0 + ph > h || dst.1 + pw > w {
        return Err(Error::argument("offset", "patch exceeds image bounds"));
    }
    if src == dst {
        log::debug!("cutpaste: patch pasted onto its own source location");
    }
    let patch = base
        .slice(ndarray::s![src.0..src.0 + ph, src.1..src.1 + pw, ..])
        .to_owned();
    let mut out = base.clone();
    out.slice_mut(ndarray::s![dst.0..dst.0 + ph, dst.1..dst.1 + pw, ..])
        .assign(&patch);
    let mut mask = Array2::<u8>::zeros((h, w));
    mask.slice_mut(ndarray::s![dst.0..dst.0 + ph, dst.1..dst.1 + pw])
        .fill(1);
    let _ = c;
    Ok((out, mask))
}

/// Sample a patch shape from an area-ratio range and a log-uniform aspect
/// range, clamped to fit.
pub fn sample_patch_shape<R: rand::Rng>(
    rng: &mut R,
    h: usize,
    w: usize,
    area_range: (f64, f64),
    aspect_range: (f64, f64),
) -> (usize, usize) {
    let area = rng.random_range(area_range.0..=area_range.1) * (h * w) as f64;
    let log_aspect = rng.random_range(aspect_range.0.ln()..=aspect_range.1.ln());
    let aspect = log_aspect.exp();
    let ph = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let pw = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    (ph, pw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn gradient_image(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            (i as f32 * 0.01 + j as f32 * 0.003 + c as f32 * 0.1).fract()
        })
    }

    #[test]
    fn mask_popcount_equals_patch_area() {
        let img = gradient_image(224, 224);
        let (_, mask) = cutpaste_rect(&img, (100, 100), (10, 10), (32, 48)).unwrap();
        assert_eq!(mask.iter().filter(|&&v| v == 1).count(), 32 * 48);
    }

    #[test]
    fn self_paste_leaves_image_unchanged_but_marks_mask() {
        let img = gradient_image(64, 64);
        let (out, mask) = cutpaste_rect(&img, (5, 9), (5, 9), (8, 8)).unwrap();
        assert_eq!(out, img);
        assert_eq!(mask.iter().filter(|&&v| v == 1).count(), 64);
    }

    #[test]
    fn pixels_outside_mask_are_untouched() {
        let img = gradient_image(64, 64);
        let (out, mask) = cutpaste_rect(&img, (40, 40), (8, 8), (12, 10)).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                if mask[(i, j)] == 0 {
                    for c in 0..3 {
                        assert_eq!(out[(i, j, c)], img[(i, j, c)]);
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_patch_is_an_argument_error() {
        let img = gradient_image(16, 16);
        assert!(cutpaste_rect(&img, (0, 0), (0, 0), (17, 4)).is_err());
        assert!(cutpaste_rect(&img, (10, 0), (0, 0), (8, 4)).is_err());
    }
}
