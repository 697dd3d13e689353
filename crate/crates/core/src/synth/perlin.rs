//! Gradient-lattice (Perlin) noise fields and their binarization into
//! defect-shaped masks.

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::scalar::Scalar;
use ndarray::Array2;
use rand::Rng;

/// Smooth noise sampled on a pixel grid. Values are bounded in `[-1, 1]`
/// and vanish exactly at lattice points.
#[derive(Debug, Clone)]
pub struct NoiseField<S: Scalar> {
    pub values: Array2<S>,
    pub seed: u64,
    pub period_x: usize,
    pub period_y: usize,
}

/// Quintic fade; C² at the lattice joints.
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(t: f64, a: f64, b: f64) -> f64 {
    a + t * (b - a)
}

/// Unit gradient grid for a seeded lattice, row-major `(ny, nx)` wrapping.
pub(crate) fn gradient_grid(ny: usize, nx: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = rng_from(seed);
    (0..ny * nx)
        .map(|_| {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            (angle.cos(), angle.sin())
        })
        .collect()
}

/// Evaluate one pixel of the lattice noise. Shared by the field builder and
/// the test-side reference evaluator.
pub(crate) fn eval_at(
    grads: &[(f64, f64)],
    ny: usize,
    nx: usize,
    period_y: usize,
    period_x: usize,
    i: usize,
    j: usize,
) -> f64 {
    let cy = i / period_y;
    let cx = j / period_x;
    let fy = (i % period_y) as f64 / period_y as f64;
    let fx = (j % period_x) as f64 / period_x as f64;
    let g = |gy: usize, gx: usize| grads[(gy % ny) * nx + (gx % nx)];
    let dot = |(gxv, gyv): (f64, f64), dx: f64, dy: f64| gxv * dx + gyv * dy;
    let n00 = dot(g(cy, cx), fx, fy);
    let n01 = dot(g(cy, cx + 1), fx - 1.0, fy);
    let n10 = dot(g(cy + 1, cx), fx, fy - 1.0);
    let n11 = dot(g(cy + 1, cx + 1), fx - 1.0, fy - 1.0);
    let u = fade(fx);
    let v = fade(fy);
    let x0 = lerp(u, n00, n01);
    let x1 = lerp(u, n10, n11);
    // unit-gradient 2-d lattice noise peaks at ±√2/2; rescale to ±1
    lerp(v, x0, x1) * std::f64::consts::SQRT_2
}

/// Build a `h × w` noise field with lattice spacing `(period_y, period_x)`
/// pixels. The lattice tiles the image; gradients wrap so periods need not
/// divide the output dims.
pub fn perlin_field<S: Scalar>(
    h: usize,
    w: usize,
    period_x: usize,
    period_y: usize,
    seed: u64,
) -> Result<NoiseField<S>> {
    if h == 0 || w == 0 {
        return Err(Error::argument("dims", "field dims must be positive"));
    }
    if period_x == 0 || period_y == 0 {
        return Err(Error::argument("period", "lattice periods must be positive"));
    }
    let nx = w.div_ceil(period_x).max(1);
    let ny = h.div_ceil(period_y).max(1);
    let grads = gradient_grid(ny, nx, seed);
    let mut values = Array2::<S>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            values[(i, j)] = S::from_f64(eval_at(&grads, ny, nx, period_y, period_x, i, j));
        }
    }
    Ok(NoiseField {
        values,
        seed,
        period_x,
        period_y,
    })
}

/// Threshold the absolute field: `mask = |value| > threshold`.
pub fn binarize<S: Scalar>(field: &NoiseField<S>, threshold: f64) -> Result<Array2<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::argument(
            "threshold",
            format!("threshold must lie in (0, 1), got {threshold}"),
        ));
    }
    let t = S::from_f64(threshold);
    Ok(field.values.mapv(|v| u8::from(v.abs() > t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_inputs_give_bitwise_identical_fields() {
        let a = perlin_field::<f32>(64, 48, 16, 8, 42).unwrap();
        let b = perlin_field::<f32>(64, 48, 16, 8, 42).unwrap();
        assert_eq!(a.values, b.values);
        let c = perlin_field::<f32>(64, 48, 16, 8, 43).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn lattice_points_are_exactly_zero() {
        let field = perlin_field::<f64>(64, 64, 16, 16, 7).unwrap();
        for i in (0..64).step_by(16) {
            for j in (0..64).step_by(16) {
                assert_eq!(field.values[(i, j)], 0.0, "nonzero at lattice ({i},{j})");
            }
        }
    }

    #[test]
    fn field_statistics_over_ten_seeds() {
        // range and near-zero mean, checked per seed
        for seed in 0..10u64 {
            let field = perlin_field::<f64>(256, 256, 32, 32, seed).unwrap();
            let min = field.values.iter().cloned().fold(f64::MAX, f64::min);
            let max = field.values.iter().cloned().fold(f64::MIN, f64::max);
            let mean = field.values.mean().unwrap();
            assert!(min >= -1.0 && max <= 1.0, "seed {seed}: range [{min},{max}]");
            assert!(mean.abs() < 0.05, "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn field_matches_pointwise_reference_evaluation() {
        // independent route: re-derive the gradient grid and evaluate the
        // lattice interpolation per point
        let (h, w, py, px, seed) = (40usize, 56usize, 8usize, 16usize, 99u64);
        let field = perlin_field::<f64>(h, w, px, py, seed).unwrap();
        let ny = h.div_ceil(py);
        let nx = w.div_ceil(px);
        let grads = gradient_grid(ny, nx, seed);
        for &(i, j) in &[(0, 0), (3, 5), (17, 31), (39, 55), (8, 16), (20, 40)] {
            let expect = eval_at(&grads, ny, nx, py, px, i, j);
            assert!((field.values[(i, j)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn binarize_extremes() {
        let field = perlin_field::<f64>(32, 32, 8, 8, 5).unwrap();
        let max_abs = field.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let none = binarize(&field, (max_abs + 1e-9).min(0.999_999)).unwrap();
        assert!(none.iter().all(|&v| v == 0));
        let almost_all = binarize(&field, 1e-9).unwrap();
        let nonzero_field = field.values.iter().filter(|v| v.abs() > 1e-9).count();
        assert_eq!(almost_all.iter().filter(|&&v| v == 1).count(), nonzero_field);
    }

    #[test]
    fn binarize_is_monotone_in_threshold() {
        for seed in 0..5u64 {
            let field = perlin_field::<f64>(48, 48, 8, 8, seed).unwrap();
            let mut prev = usize::MAX;
            for step in 1..=20 {
                let t = step as f64 / 21.0;
                let mask = binarize(&field, t).unwrap();
                let pop = mask.iter().filter(|&&v| v == 1).count();
                assert!(pop <= prev, "popcount not monotone at t={t}");
                prev = pop;
            }
        }
    }

    #[test]
    fn binarize_rejects_out_of_range_threshold() {
        let field = perlin_field::<f64>(8, 8, 4, 4, 1).unwrap();
        assert!(binarize(&field, 0.0).is_err());
        assert!(binarize(&field, 1.0).is_err());
    }

    #[test]
    fn degenerate_dims_are_argument_errors() {
        assert!(perlin_field::<f32>(0, 8, 4, 4, 1).is_err());
        assert!(perlin_field::<f32>(8, 0, 4, 4, 1).is_err());
        assert!(perlin_field::<f32>(8, 8, 0, 4, 1).is_err());
    }
}
