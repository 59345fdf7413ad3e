//! Browser bindings for three views of the pehcm geometry: the decision field
//! of a hyperbolic MLR class on the Poincaré disk, the exponential map's warp
//! of a Euclidean grid, and AHCD target trajectories.
//!
//! The exported functions are thin wrappers over plain Rust functions so the
//! numerics can be tested natively.

use ndarray::Array2;
use pehcm::geometry::{exp_map, Curvature, PoincarePoint};
use pehcm::hcm::{StratumMeans, TargetDistances};
use pehcm::mlr::{mlr_logits, MlrParams};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

fn curvature(c: f64) -> Result<Curvature, String> {
    Curvature::new(c).map_err(|e| e.to_string())
}

/// Tangent vector at the origin whose exponential map is `p`.
fn log_map(p: &[f64], c: Curvature) -> Vec<f64> {
    let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; p.len()];
    }
    let sn = (c.sqrt() * n).min(1.0 - 1e-12);
    let s = sn.atanh() / sn;
    p.iter().map(|v| v * s).collect()
}

/// Logit of one MLR class with anchor `(px, py)` (a point in the disk) and
/// normal `(ax, ay)`, sampled on a `res × res` grid spanning the disk.
/// Row-major from the top-left corner; cells outside the disk are NaN.
pub fn mlr_field_values(px: f64, py: f64, ax: f64, ay: f64, c: f64, res: usize) -> Result<Vec<f64>, String> {
    let c = curvature(c)?;
    if res < 2 {
        return Err("resolution must be at least 2".into());
    }
    let radius = 1.0 / c.sqrt();
    if (px * px + py * py).sqrt() >= radius {
        return Err("anchor must lie inside the disk".into());
    }
    let raw = log_map(&[px, py], c);
    let params = MlrParams {
        p_raw: Array2::from_shape_vec((1, 2), raw).expect("1 × 2"),
        a: Array2::from_shape_vec((1, 2), vec![ax, ay]).expect("1 × 2"),
        curvature: c,
    };
    let mut out = Vec::with_capacity(res * res);
    for row in 0..res {
        let y = radius * (1.0 - 2.0 * row as f64 / (res - 1) as f64);
        for col in 0..res {
            let x = radius * (2.0 * col as f64 / (res - 1) as f64 - 1.0);
            let inside = (x * x + y * y).sqrt() < radius * (1.0 - 1e-3);
            let v = if inside {
                let z = PoincarePoint::new(vec![x, y], c).map_err(|e| e.to_string())?;
                mlr_logits(&z, &params).map_err(|e| e.to_string())?.0[0]
            } else {
                f64::NAN
            };
            out.push(v);
        }
    }
    Ok(out)
}

/// Images under the exponential map of `lines` vertical and `lines`
/// horizontal Euclidean grid lines over `[-extent, extent]²`, each sampled at
/// `samples` points. Flat `[x, y, x, y, ...]`, vertical lines first.
pub fn exp_grid_points(c: f64, extent: f64, lines: usize, samples: usize) -> Result<Vec<f64>, String> {
    let c = curvature(c)?;
    if lines < 2 || samples < 2 || !(extent > 0.0) {
        return Err("need at least two lines, two samples and a positive extent".into());
    }
    let at = |i: usize, n: usize| extent * (2.0 * i as f64 / (n - 1) as f64 - 1.0);
    let mut out = Vec::with_capacity(4 * lines * samples);
    for vertical in [true, false] {
        for l in 0..lines {
            for s in 0..samples {
                let (x, y) = if vertical {
                    (at(l, lines), at(s, samples))
                } else {
                    (at(s, samples), at(l, lines))
                };
                let z = exp_map(&[x, y], c).map_err(|e| e.to_string())?;
                out.extend_from_slice(z.coords());
            }
        }
    }
    Ok(out)
}

/// Simulated `(d1, d2)` after every step of AHCD momentum updates, with
/// batch means drawn around `(mean_d1, mean_d2)` with Gaussian `noise`.
/// Targets are re-initialised at the start of each epoch listed in `reinit`.
/// Flat `[d1, d2, d1, d2, ...]`, one pair per step, starting with the
/// initial values.
#[allow(clippy::too_many_arguments)]
pub fn ahcd_values(
    beta: f64,
    mean_d1: f64,
    mean_d2: f64,
    noise: f64,
    epochs: usize,
    steps_per_epoch: usize,
    reinit: &[u32],
    seed: u64,
) -> Result<Vec<f64>, String> {
    if !(0.0..1.0).contains(&beta) {
        return Err("beta must lie in [0, 1)".into());
    }
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| e.to_string())?;
    let reinit: Vec<usize> = reinit.iter().map(|&e| e as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = TargetDistances::new(beta);
    let mut out = vec![t.d1, t.d2];
    for epoch in 0..epochs {
        t.begin_epoch(epoch, &reinit);
        for _ in 0..steps_per_epoch {
            t.momentum_update(StratumMeans {
                d1: Some(mean_d1 + normal.sample(&mut rng)),
                d2: Some(mean_d2 + normal.sample(&mut rng)),
            });
            out.extend([t.d1, t.d2]);
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn mlr_field(px: f64, py: f64, ax: f64, ay: f64, c: f64, res: usize) -> Result<Vec<f64>, JsError> {
    mlr_field_values(px, py, ax, ay, c, res).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn exp_grid(c: f64, extent: f64, lines: usize, samples: usize) -> Result<Vec<f64>, JsError> {
    exp_grid_points(c, extent, lines, samples).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn ahcd_trajectory(
    beta: f64,
    mean_d1: f64,
    mean_d2: f64,
    noise: f64,
    epochs: usize,
    steps_per_epoch: usize,
    reinit: &[u32],
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    ahcd_values(beta, mean_d1, mean_d2, noise, epochs, steps_per_epoch, reinit, seed).map_err(|e| JsError::new(&e))
}
