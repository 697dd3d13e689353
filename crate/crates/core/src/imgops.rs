//! Array-based image operations on `(h, w, c)` color data in `[0, 1]` and
//! `(h, w)` binary masks.

use crate::scalar::Scalar;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn resize_bilinear<S: Scalar>(img: &ArrayView3<S>, out_h: usize, out_w: usize) -> Array3<S> {
    let (h, w, c) = img.dim();
    let mut out = Array3::<S>::zeros((out_h, out_w, c));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oi in 0..out_h {
        let fy = ((oi as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = S::from_f64(fy - y0 as f64);
        for oj in 0..out_w {
            let fx = ((oj as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = S::from_f64(fx - x0 as f64);
            for ch in 0..c {
                let top = img[(y0, x0, ch)] * (S::one() - wx) + img[(y0, x1, ch)] * wx;
                let bot = img[(y1, x0, ch)] * (S::one() - wx) + img[(y1, x1, ch)] * wx;
                out[(oi, oj, ch)] = top * (S::one() - wy) + bot * wy;
            }
        }
    }
    out
}

/// Nearest-neighbor mask resize; preserves binarity exactly.
pub fn resize_mask_nearest(mask: &ArrayView2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut out = Array2::<u8>::zeros((out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oi in 0..out_h {
        let y = (((oi as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(h - 1);
        for oj in 0..out_w {
            let x = (((oj as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(w - 1);
            out[(oi, oj)] = mask[(y, x)];
        }
    }
    out
}

pub fn center_crop<S: Scalar>(img: &ArrayView3<S>, crop_h: usize, crop_w: usize) -> Array3<S> {
    let (h, w, _) = img.dim();
    assert!(crop_h <= h && crop_w <= w, "crop larger than image");
    let top = (h - crop_h) / 2;
    let left = (w - crop_w) / 2;
    img.slice(ndarray::s![top..top + crop_h, left..left + crop_w, ..])
        .to_owned()
}

pub fn center_crop_mask(mask: &ArrayView2<u8>, crop_h: usize, crop_w: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    assert!(crop_h <= h && crop_w <= w, "crop larger than mask");
    let top = (h - crop_h) / 2;
    let left = (w - crop_w) / 2;
    mask.slice(ndarray::s![top..top + crop_h, left..left + crop_w])
        .to_owned()
}

/// Rotate by an arbitrary angle (degrees, counter-clockwise) about the image
/// center, bilinear sampling, border replication. An exact multiple of 90 is
/// dispatched to the lossless path.
pub fn rotate<S: Scalar>(img: &ArrayView3<S>, degrees: f64) -> Array3<S> {
    let quarter = degrees / 90.0;
    if (quarter - quarter.round()).abs() < 1e-12 {
        let turns = quarter.round() as i64;
        return rotate_right_angle(img, turns.rem_euclid(4) as u8);
    }
    let (h, w, c) = img.dim();
    let theta = degrees.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::<S>::zeros((h, w, c));
    for oi in 0..h {
        for oj in 0..w {
            // inverse-map the output pixel into the source frame
            let dy = oi as f64 - cy;
            let dx = oj as f64 - cx;
            let sy = (cos_t * dy + sin_t * dx + cy).clamp(0.0, (h - 1) as f64);
            let sx = (-sin_t * dy + cos_t * dx + cx).clamp(0.0, (w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wy = S::from_f64(sy - y0 as f64);
            let wx = S::from_f64(sx - x0 as f64);
            for ch in 0..c {
                let top = img[(y0, x0, ch)] * (S::one() - wx) + img[(y0, x1, ch)] * wx;
                let bot = img[(y1, x0, ch)] * (S::one() - wx) + img[(y1, x1, ch)] * wx;
                out[(oi, oj, ch)] = top * (S::one() - wy) + bot * wy;
            }
        }
    }
    out
}

/// Lossless rotation by `turns` quarter-turns counter-clockwise.
pub fn rotate_right_angle<S: Scalar>(img: &ArrayView3<S>, turns: u8) -> Array3<S> {
    let (h, w, c) = img.dim();
    match turns % 4 {
        0 => img.to_owned(),
        1 => {
            let mut out = Array3::<S>::zeros((w, h, c));
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        out[(w - 1 - j, i, ch)] = img[(i, j, ch)];
                    }
                }
            }
            out
        }
        2 => {
            let mut out = Array3::<S>::zeros((h, w, c));
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        out[(h - 1 - i, w - 1 - j, ch)] = img[(i, j, ch)];
                    }
                }
            }
            out
        }
        _ => {
            let mut out = Array3::<S>::zeros((w, h, c));
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        out[(j, h - 1 - i, ch)] = img[(i, j, ch)];
                    }
                }
            }
            out
        }
    }
}

pub fn clamp01<S: Scalar>(img: &mut Array3<S>) {
    img.mapv_inplace(|v| v.max(S::zero()).min(S::one()));
}

/// Per-channel luma weights for grayscale conversion.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn to_grayscale<S: Scalar>(img: &ArrayView3<S>) -> Array3<S> {
    let (h, w, c) = img.dim();
    let mut out = Array3::<S>::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let mut y = S::zero();
            for ch in 0..c.min(3) {
                y = y + img[(i, j, ch)] * S::from_f64(LUMA[ch]);
            }
            for ch in 0..c {
                out[(i, j, ch)] = y;
            }
        }
    }
    out
}

pub fn adjust_brightness<S: Scalar>(img: &mut Array3<S>, factor: S) {
    img.mapv_inplace(|v| (v * factor).max(S::zero()).min(S::one()));
}

pub fn adjust_contrast<S: Scalar>(img: &mut Array3<S>, factor: S) {
    let mean = to_grayscale(&img.view()).mean().unwrap_or(S::zero());
    img.mapv_inplace(|v| ((v - mean) * factor + mean).max(S::zero()).min(S::one()));
}

pub fn adjust_saturation<S: Scalar>(img: &mut Array3<S>, factor: S) {
    let gray = to_grayscale(&img.view());
    ndarray::Zip::from(&mut *img).and(&gray).for_each(|v, &g| {
        *v = ((*v - g) * factor + g).max(S::zero()).min(S::one());
    });
}

/// Shift hue by `delta` (fraction of a full turn, in [-0.5, 0.5]).
pub fn adjust_hue<S: Scalar>(img: &mut Array3<S>, delta: f64) {
    let (h, w, c) = img.dim();
    if c < 3 {
        return;
    }
    for i in 0..h {
        for j in 0..w {
            let r = img[(i, j, 0)].to_f64_lossy();
            let g = img[(i, j, 1)].to_f64_lossy();
            let b = img[(i, j, 2)].to_f64_lossy();
            let (hh, s, v) = rgb_to_hsv(r, g, b);
            let hh = (hh + delta).rem_euclid(1.0);
            let (r, g, b) = hsv_to_rgb(hh, s, v);
            img[(i, j, 0)] = S::from_f64(r);
            img[(i, j, 1)] = S::from_f64(g);
            img[(i, j, 2)] = S::from_f64(b);
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    let d = max - min;
    let s = if max == 0.0 { 0.0 } else { d / max };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian blur on a single-channel map. `sigma <= 0` is identity.
pub fn gaussian_blur<S: Scalar>(map: &ArrayView2<S>, sigma: f64) -> Array2<S> {
    if sigma <= 0.0 {
        return map.to_owned();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for k in -radius..=radius {
        kernel.push((-0.5 * (k as f64 / sigma).powi(2)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    let kernel: Vec<S> = kernel.into_iter().map(|v| S::from_f64(v / sum)).collect();

    let (h, w) = map.dim();
    let reflect = |idx: i64, len: usize| -> usize {
        let len = len as i64;
        let mut i = idx;
        if i < 0 {
            i = -i - 1;
        }
        if i >= len {
            i = 2 * len - 1 - i;
        }
        i.clamp(0, len - 1) as usize
    };
    let mut tmp = Array2::<S>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = S::zero();
            for (ki, kv) in kernel.iter().enumerate() {
                let jj = reflect(j as i64 + ki as i64 - radius, w);
                acc = acc + map[(i, jj)] * *kv;
            }
            tmp[(i, j)] = acc;
        }
    }
    let mut out = Array2::<S>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = S::zero();
            for (ki, kv) in kernel.iter().enumerate() {
                let ii = reflect(i as i64 + ki as i64 - radius, h);
                acc = acc + tmp[(ii, j)] * *kv;
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Bilinear upsample of a score grid to a target resolution.
pub fn upsample_map_bilinear<S: Scalar>(
    grid: &ArrayView2<S>,
    out_h: usize,
    out_w: usize,
) -> Array2<S> {
    let (h, w) = grid.dim();
    let expanded = grid
        .to_owned()
        .into_shape_with_order((h, w, 1))
        .unwrap();
    let resized = resize_bilinear(&expanded.view(), out_h, out_w);
    resized.index_axis(ndarray::Axis(2), 0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn test_image(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            ((i * 31 + j * 17 + c * 7) % 100) as f64 / 100.0
        })
    }

    #[test]
    fn resize_identity_when_same_dims() {
        let img = test_image(8, 8);
        let out = resize_bilinear(&img.view(), 8, 8);
        assert_eq!(img, out);
    }

    #[test]
    fn mask_resize_stays_binary() {
        let mask = Array2::from_shape_fn((9, 7), |(i, j)| ((i + j) % 2) as u8);
        let out = resize_mask_nearest(&mask.view(), 16, 16);
        assert!(out.iter().all(|&v| v == 0 || v == 1));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = test_image(10, 10);
        assert_eq!(rotate(&img.view(), 0.0), img);
        assert_eq!(rotate(&img.view(), 360.0), img);
    }

    #[test]
    fn quarter_turns_are_lossless() {
        let img = test_image(6, 6);
        let r4 = rotate_right_angle(
            &rotate_right_angle(
                &rotate_right_angle(&rotate_right_angle(&img.view(), 1).view(), 1).view(),
                1,
            )
            .view(),
            1,
        );
        assert_eq!(img, r4);
        assert_eq!(rotate(&img.view(), 90.0), rotate_right_angle(&img.view(), 1));
    }

    #[test]
    fn grayscale_is_idempotent() {
        let img = test_image(5, 5);
        let g1 = to_grayscale(&img.view());
        let g2 = to_grayscale(&g1.view());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn hue_full_turn_roundtrips() {
        let mut img = test_image(4, 4);
        let orig = img.clone();
        adjust_hue(&mut img, 0.25);
        adjust_hue(&mut img, -0.25);
        for (a, b) in img.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constant_maps() {
        let map = Array2::from_elem((12, 12), 0.6f64);
        let out = gaussian_blur(&map.view(), 2.0);
        for v in out.iter() {
            assert!((v - 0.6).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_preserves_constants_and_dims() {
        let grid = Array2::from_elem((4, 4), 0.25f64);
        let up = upsample_map_bilinear(&grid.view(), 17, 31);
        assert_eq!(up.dim(), (17, 31));
        assert!(up.iter().all(|v| (v - 0.25).abs() < 1e-9));
    }
}
