//! Poincaré-ball primitives.
//!
//! Everything here runs in `f64`. Points are kept strictly inside the ball of
//! radius `1/√c` by clipping to a shell of relative width [`BALL_EPS`], which
//! keeps the `atanh`/`asinh` arguments downstream finite.
//!
//! The `*_backward` kernels are the vector-Jacobian products used by the
//! training objective. They take the same raw slices as the forward kernels.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Relative shell margin used by every clipping operation.
pub const BALL_EPS: f64 = 1e-5;

/// Below this value of `√c‖x‖` the exponential map switches to its Taylor form.
const TAYLOR_CUTOFF: f64 = 1e-7;

static HYPERBOLIC_OPS: AtomicU64 = AtomicU64::new(0);

#[inline]
fn tick() {
    HYPERBOLIC_OPS.fetch_add(1, Ordering::Relaxed);
}

/// Process-wide count of hyperbolic kernel invocations (exp map, Möbius
/// addition and their backward passes), across all threads.
pub fn hyperbolic_op_count() -> u64 {
    HYPERBOLIC_OPS.load(Ordering::Relaxed)
}

/// Ball curvature `c > 0`; the ball has radius `1/√c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature(f64);

impl Curvature {
    pub const DEFAULT: Curvature = Curvature(1e-3);

    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Curvature(c))
        } else {
            Err(Error::InvalidInput(format!("curvature must be positive and finite, got {c}")))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Largest norm a clipped point may have.
    #[inline]
    pub fn max_norm(self) -> f64 {
        (1.0 - BALL_EPS) / self.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature::DEFAULT
    }
}

/// A point strictly inside the Poincaré ball of its curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincarePoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl PoincarePoint {
    /// Wraps `coords`, rejecting points on or outside the clipping shell.
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        check_finite(&coords)?;
        if curvature.value() * norm_sq(&coords) > (1.0 - BALL_EPS).powi(2) * (1.0 + 1e-12) {
            return Err(Error::InvalidInput("point lies outside the Poincaré ball".into()));
        }
        Ok(PoincarePoint { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        PoincarePoint {
            coords: vec![0.0; dim],
            curvature,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.coords).sqrt()
    }

    /// Möbius inverse, which for the Poincaré ball is plain negation.
    pub fn neg(&self) -> Self {
        PoincarePoint {
            coords: self.coords.iter().map(|v| -v).collect(),
            curvature: self.curvature,
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::InvalidInput("empty vector".into()));
    }
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput("vector has non-finite components".into()))
    }
}

fn same_curvature(a: Curvature, b: Curvature) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "curvature mismatch: {} vs {}",
            a.value(),
            b.value()
        )))
    }
}

/// `tanh(t)/t`, exact at the origin.
#[inline]
fn tanh_ratio(t: f64) -> f64 {
    if t < TAYLOR_CUTOFF {
        1.0 - t * t / 3.0
    } else {
        t.tanh() / t
    }
}

/// Rescales `z` in place onto the clipping shell if it lies beyond it.
/// Returns whether clipping happened.
pub(crate) fn clip_in_place(z: &mut [f64], c: Curvature) -> bool {
    let limit = 1.0 - BALL_EPS;
    let n2 = norm_sq(z);
    if c.value() * n2 >= limit * limit {
        let scale = c.max_norm() / n2.sqrt();
        z.iter_mut().for_each(|v| *v *= scale);
        true
    } else {
        false
    }
}

/// Vector-Jacobian product of the clipping step. `raw` is the pre-clip vector.
pub(crate) fn clip_backward(raw: &[f64], c: Curvature, grad_out: &mut [f64]) {
    let limit = 1.0 - BALL_EPS;
    let n2 = norm_sq(raw);
    if c.value() * n2 >= limit * limit {
        let n = n2.sqrt();
        let scale = c.max_norm() / n;
        let proj = dot(raw, grad_out) / n2;
        for (g, r) in grad_out.iter_mut().zip(raw) {
            *g = scale * (*g - proj * r);
        }
    }
}

/// Exponential map at the origin into `out`; returns whether the result was clipped.
pub(crate) fn exp_map_into(x: &[f64], c: Curvature, out: &mut [f64]) -> bool {
    tick();
    let t = c.sqrt() * norm_sq(x).sqrt();
    let g = tanh_ratio(t);
    for (o, v) in out.iter_mut().zip(x) {
        *o = g * v;
    }
    clip_in_place(out, c)
}

/// Gradient of the exponential map (including clipping) with respect to `x`.
pub(crate) fn exp_map_backward(x: &[f64], c: Curvature, grad_z: &[f64]) -> Vec<f64> {
    tick();
    let s = c.sqrt();
    let r = norm_sq(x).sqrt();
    let t = s * r;
    let g = tanh_ratio(t);

    let mut grad_y = grad_z.to_vec();
    let y: Vec<f64> = x.iter().map(|v| g * v).collect();
    clip_backward(&y, c, &mut grad_y);

    // (g'(r)/r), a smooth function of t with a series branch near zero.
    let gp_over_r = if t < 1e-2 {
        let t2 = t * t;
        c.value() * (-2.0 / 3.0 + 8.0 * t2 / 15.0 - 34.0 * t2 * t2 / 105.0)
    } else {
        let th = t.tanh();
        c.value() * (t * (1.0 - th * th) - th) / (t * t * t)
    };
    let xg = dot(x, &grad_y);
    x.iter()
        .zip(&grad_y)
        .map(|(xi, gi)| g * gi + gp_over_r * xg * xi)
        .collect()
}

/// Unclipped Möbius sum `u ⊕ v` into `out`.
pub(crate) fn mobius_add_raw(u: &[f64], v: &[f64], c: Curvature, out: &mut [f64]) {
    tick();
    let c = c.value();
    let uv = dot(u, v);
    let nu = norm_sq(u);
    let nv = norm_sq(v);
    let a = 1.0 + 2.0 * c * uv + c * nv;
    let b = 1.0 - c * nu;
    let den = 1.0 + 2.0 * c * uv + c * c * nu * nv;
    for ((o, ui), vi) in out.iter_mut().zip(u).zip(v) {
        *o = (a * ui + b * vi) / den;
    }
}

/// Gradients of `clip(u ⊕ v)` with respect to `u` and `v`.
pub(crate) fn mobius_add_backward(
    u: &[f64],
    v: &[f64],
    c: Curvature,
    grad_m: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    tick();
    let mut raw = vec![0.0; u.len()];
    mobius_add_raw(u, v, c, &mut raw);
    let mut gm = grad_m.to_vec();
    clip_backward(&raw, c, &mut gm);

    let c = c.value();
    let uv = dot(u, v);
    let nu = norm_sq(u);
    let nv = norm_sq(v);
    let a = 1.0 + 2.0 * c * uv + c * nv;
    let b = 1.0 - c * nu;
    let den = 1.0 + 2.0 * c * uv + c * c * nu * nv;

    let g_num: Vec<f64> = gm.iter().map(|g| g / den).collect();
    let g_den = -dot(&gm, &raw) / den;
    let gu_dot = dot(&g_num, u);
    let gv_dot = dot(&g_num, v);

    // num = a·u + b·v, with a(u,v), b(u), den(u,v).
    let grad_u = (0..u.len())
        .map(|i| {
            a * g_num[i]
                + gu_dot * 2.0 * c * v[i]
                + gv_dot * (-2.0 * c * u[i])
                + g_den * (2.0 * c * v[i] + 2.0 * c * c * nv * u[i])
        })
        .collect();
    let grad_v = (0..v.len())
        .map(|i| {
            b * g_num[i]
                + gu_dot * (2.0 * c * u[i] + 2.0 * c * v[i])
                + g_den * (2.0 * c * u[i] + 2.0 * c * c * nu * v[i])
        })
        .collect();
    (grad_u, grad_v)
}

/// Exponential map at the origin: `x·tanh(√c‖x‖)/(√c‖x‖)`, clipped to the shell.
pub fn exp_map(x: &[f64], c: Curvature) -> Result<PoincarePoint> {
    check_finite(x)?;
    let mut coords = vec![0.0; x.len()];
    exp_map_into(x, c, &mut coords);
    Ok(PoincarePoint {
        coords,
        curvature: c,
    })
}

/// Pulls a finite vector inside the ball; interior points pass through untouched.
pub fn clip_to_ball(z: &[f64], c: Curvature) -> PoincarePoint {
    let mut coords = z.to_vec();
    clip_in_place(&mut coords, c);
    PoincarePoint {
        coords,
        curvature: c,
    }
}

/// Möbius addition `u ⊕ v`.
pub fn mobius_add(u: &PoincarePoint, v: &PoincarePoint) -> Result<PoincarePoint> {
    same_curvature(u.curvature, v.curvature)?;
    if u.dim() != v.dim() {
        return Err(Error::Contract(format!(
            "dimension mismatch: {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    let mut coords = vec![0.0; u.dim()];
    mobius_add_raw(&u.coords, &v.coords, u.curvature, &mut coords);
    clip_in_place(&mut coords, u.curvature);
    Ok(PoincarePoint {
        coords,
        curvature: u.curvature,
    })
}

/// Geodesic distance `(2/√c)·atanh(√c‖(−u) ⊕ v‖)`.
pub fn poincare_distance(u: &PoincarePoint, v: &PoincarePoint) -> Result<f64> {
    same_curvature(u.curvature, v.curvature)?;
    if u.coords == v.coords {
        return Ok(0.0);
    }
    let m = mobius_add(&u.neg(), v)?;
    let s = u.curvature.sqrt();
    Ok(2.0 / s * (s * m.norm()).atanh())
}

/// Slice form of [`poincare_distance`] for points already known to be in the ball.
pub(crate) fn poincare_distance_raw(u: &[f64], v: &[f64], c: Curvature) -> f64 {
    if u == v {
        return 0.0;
    }
    let neg_u: Vec<f64> = u.iter().map(|x| -x).collect();
    let mut m = vec![0.0; u.len()];
    mobius_add_raw(&neg_u, v, c, &mut m);
    clip_in_place(&mut m, c);
    let s = c.sqrt();
    2.0 / s * (s * norm_sq(&m).sqrt()).atanh()
}

/// Cosine distance without input checks; zero vectors sit at distance 1.
pub(crate) fn cosine_dist_raw(a: &[f64], b: &[f64]) -> f64 {
    let denom = (norm_sq(a) * norm_sq(b)).sqrt();
    if denom > 0.0 {
        1.0 - dot(a, b) / denom
    } else {
        1.0
    }
}

/// Distance from `z` to the hyperbolic hyperplane through `p` with normal `a`.
pub fn hyperplane_distance(z: &PoincarePoint, p: &PoincarePoint, a: &[f64]) -> Result<f64> {
    same_curvature(z.curvature, p.curvature)?;
    check_finite(a)?;
    if a.len() != z.dim() || p.dim() != z.dim() {
        return Err(Error::Contract("hyperplane dimension mismatch".into()));
    }
    let a_norm = norm_sq(a).sqrt();
    if a_norm == 0.0 {
        return Err(Error::DegenerateHyperplane);
    }
    let m = mobius_add(&p.neg(), z)?;
    let c = z.curvature;
    let s = c.sqrt();
    let lambda = 1.0 - c.value() * norm_sq(&m.coords);
    let arg = 2.0 * s * dot(&m.coords, a).abs() / (lambda * a_norm);
    Ok(arg.asinh() / s)
}
