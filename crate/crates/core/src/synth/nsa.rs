//! Gradient-domain (Poisson) patch blending: a donor rectangle is fused into
//! the base image so the seam carries no visible gradient step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3};

/// Solve `A x = b` by conjugate gradients where `A` is the 5-point Poisson
/// operator over the region. SPD, so plain CG converges.
fn conjugate_gradient<F: Fn(&[f64], &mut [f64])>(
    apply: F,
    b: &[f64],
    x: &mut [f64],
    max_iter: usize,
    tol: f64,
) -> Result<()> {
    let n = b.len();
    let mut r = vec![0.0; n];
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    for i in 0..n {
        r[i] = b[i] - ax[i];
    }
    let mut p = r.clone();
    let mut rs_old: f64 = r.iter().map(|v| v * v).sum();
    let b_norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
    if rs_old.sqrt() / b_norm < tol {
        return Ok(());
    }
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let p_ap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if p_ap.abs() < 1e-300 {
            break;
        }
        let alpha = rs_old / p_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        if rs_new.sqrt() / b_norm < tol {
            return Ok(());
        }
        let beta = rs_new / rs_old;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs_old = rs_new;
    }
    let final_res = rs_old.sqrt() / b_norm;
    if final_res < tol * 100.0 {
        // near-converged; accept
        return Ok(());
    }
    Err(Error::Solver(format!(
        "poisson blend did not converge (relative residual {final_res:.3e})"
    )))
}

/// Blend the `size = (ph, pw)` donor rectangle at `donor_off` into `base` at
/// `dst`, solving the discrete Poisson equation with the donor gradient as
/// guidance and the base as Dirichlet boundary. Returns the blended image
/// and the mask marking the region.
pub fn poisson_blend<S: Scalar>(
    base: &Array3<S>,
    donor: &Array3<S>,
    donor_off: (usize, usize),
    dst: (usize, usize),
    size: (usize, usize),
) -> Result<(Array3<S>, Array2<u8>)> {
    let (h, w, c) = base.dim();
    let (dh, dw, dc) = donor.dim();
    if dc != c {
        return Err(Error::argument("donor", "channel count mismatch"));
    }
    let (ph, pw) = size;
    if ph == 0 || pw == 0 || dst.0 + ph > h || dst.1 + pw > w {
        return Err(Error::argument("size", "patch does not fit the base image"));
    }
    if donor_off.0 + ph > dh || donor_off.1 + pw > dw {
        return Err(Error::argument("donor_off", "patch does not fit the donor"));
    }

    let n = ph * pw;
    let idx = |i: usize, j: usize| i * pw + j;
    // guidance values g and boundary values from base, all in f64
    let donor_at = |i: usize, j: usize, ch: usize| -> f64 {
        donor[(donor_off.0 + i, donor_off.1 + j, ch)].to_f64_lossy()
    };

    let mut out = base.clone();
    let mut mask = Array2::<u8>::zeros((h, w));
    for i in 0..ph {
        for j in 0..pw {
            mask[(dst.0 + i, dst.1 + j)] = 1;
        }
    }

    // neighbor offsets within the padded region; the 5-point stencil loses
    // arms that would leave the image entirely
    let neighbors = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
    for ch in 0..c {
        let mut b_vec = vec![0.0f64; n];
        let mut degree = vec![0.0f64; n];
        for i in 0..ph {
            for j in 0..pw {
                let k = idx(i, j);
                let gi = dst.0 as i64 + i as i64;
                let gj = dst.1 as i64 + j as i64;
                for (di, dj) in neighbors {
                    let ni = gi + di;
                    let nj = gj + dj;
                    if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        continue; // image border: drop the stencil arm
                    }
                    degree[k] += 1.0;
                    let pi = i as i64 + di;
                    let pj = j as i64 + dj;
                    // guidance gradient term g_p - g_q, clamped to the donor
                    let qg = donor_at(
                        pi.clamp(0, ph as i64 - 1) as usize,
                        pj.clamp(0, pw as i64 - 1) as usize,
                        ch,
                    );
                    let inside = pi >= 0 && pj >= 0 && pi < ph as i64 && pj < pw as i64;
                    b_vec[k] += donor_at(i, j, ch) - qg;
                    if !inside {
                        // Dirichlet boundary: base value enters the rhs
                        b_vec[k] += base[(ni as usize, nj as usize, ch)].to_f64_lossy();
                    }
                }
            }
        }
        let degree_ref = &degree;
        let apply = |x: &[f64], y: &mut [f64]| {
            for i in 0..ph {
                for j in 0..pw {
                    let k = idx(i, j);
                    let mut acc = degree_ref[k] * x[k];
                    if i > 0 {
                        acc -= x[idx(i - 1, j)];
                    }
                    if i + 1 < ph {
                        acc -= x[idx(i + 1, j)];
                    }
                    if j > 0 {
                        acc -= x[idx(i, j - 1)];
                    }
                    if j + 1 < pw {
                        acc -= x[idx(i, j + 1)];
                    }
                    y[k] = acc;
                }
            }
        };
        // donor patch as warm start
        let mut x = vec![0.0f64; n];
        for i in 0..ph {
            for j in 0..pw {
                x[idx(i, j)] = donor_at(i, j, ch);
            }
        }
        conjugate_gradient(apply, &b_vec, &mut x, 20 * n + 200, 1e-10)?;
        for i in 0..ph {
            for j in 0..pw {
                let v = x[idx(i, j)].clamp(0.0, 1.0);
                out[(dst.0 + i, dst.1 + j, ch)] = S::from_f64(v);
            }
        }
    }
    Ok((out, mask))
}

/// Discrete 5-point Laplacian at an interior point of a channel.
pub fn laplacian_at<S: Scalar>(img: &Array3<S>, i: usize, j: usize, ch: usize) -> f64 {
    4.0 * img[(i, j, ch)].to_f64_lossy()
        - img[(i - 1, j, ch)].to_f64_lossy()
        - img[(i + 1, j, ch)].to_f64_lossy()
        - img[(i, j - 1, ch)].to_f64_lossy()
        - img[(i, j + 1, ch)].to_f64_lossy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn textured(h: usize, w: usize, phase: f64) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            let v = 0.5 + 0.3 * ((i as f64 * 0.7 + j as f64 * 0.31 + phase + c as f64).sin());
            v as f32
        })
    }

    #[test]
    fn identical_donor_patch_reproduces_the_base() {
        let base = textured(40, 40, 0.0);
        let donor = base.clone();
        let (out, mask) = poisson_blend(&base, &donor, (10, 10), (10, 10), (12, 12)).unwrap();
        assert!(mask.iter().any(|&v| v == 1));
        for ((i, j, c), v) in out.indexed_iter() {
            assert!(
                (v - base[(i, j, c)]).abs() < 1e-4,
                "pixel ({i},{j},{c}) drifted: {v} vs {}",
                base[(i, j, c)]
            );
        }
    }

    #[test]
    fn constant_donor_into_constant_base_stays_at_base_color() {
        let base = Array3::<f32>::from_elem((30, 30, 3), 0.6);
        let donor = Array3::<f32>::from_elem((30, 30, 3), 0.1);
        let (out, _) = poisson_blend(&base, &donor, (5, 5), (8, 8), (10, 10)).unwrap();
        // zero guidance gradient + Dirichlet base boundary → harmonic → base
        for v in out.iter() {
            assert!((v - 0.6).abs() < 1e-4, "interior drifted to {v}");
        }
    }

    #[test]
    fn interior_laplacian_matches_the_donor() {
        let base = textured(48, 48, 0.0);
        let donor = textured(48, 48, 2.5);
        let (dst, size, off) = ((12, 12), (16, 16), (4, 4));
        let (out, _) = poisson_blend(&base, &donor, off, dst, size).unwrap();
        // strict interior: all four stencil neighbors inside the region
        let mut sq_sum = 0.0;
        let mut count = 0usize;
        for i in 1..size.0 - 1 {
            for j in 1..size.1 - 1 {
                for ch in 0..3 {
                    let lap_out = laplacian_at(&out, dst.0 + i, dst.1 + j, ch);
                    let lap_donor = laplacian_at(&donor, off.0 + i, off.1 + j, ch);
                    sq_sum += (lap_out - lap_donor).powi(2);
                    count += 1;
                }
            }
        }
        let rms = (sq_sum / count as f64).sqrt();
        assert!(rms < 1e-3, "laplacian residual rms {rms}");
    }

    #[test]
    fn out_of_bounds_patch_is_rejected() {
        let base = textured(20, 20, 0.0);
        let donor = textured(20, 20, 1.0);
        assert!(poisson_blend(&base, &donor, (0, 0), (15, 15), (10, 10)).is_err());
    }
}
