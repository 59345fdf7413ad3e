//! Hyperbolic multinomial logistic regression over coarse classes.
//!
//! Class `k` owns a hyperplane through `p_k = exp_map(p_raw_k)` with Euclidean
//! normal `a_k`. Its logit is the signed, `‖a_k‖`-weighted distance from the
//! embedded point to that hyperplane.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{
    self, dot, exp_map_backward, exp_map_into, hyperplane_distance, mobius_add,
    mobius_add_backward, mobius_add_raw, norm_sq, Curvature, PoincarePoint,
};

/// Normals shorter than this are re-drawn by [`MlrParams::repair_normals`].
pub const MIN_NORMAL_NORM: f64 = 1e-8;

/// Learnable hyperplanes, one row per coarse class.
#[derive(Debug, Clone, PartialEq)]
pub struct MlrParams {
    /// Pre-map offsets; the anchor is `exp_map(p_raw[k])`.
    pub p_raw: Array2<f64>,
    /// Hyperplane normals.
    pub a: Array2<f64>,
    pub curvature: Curvature,
}

impl MlrParams {
    /// Anchors at the origin, normals drawn from `N(0, 1/n)`.
    pub fn init<R: Rng + ?Sized>(
        n_classes: usize,
        dim: usize,
        curvature: Curvature,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let a = Array2::from_shape_fn((n_classes, dim), |_| normal.sample(rng));
        MlrParams {
            p_raw: Array2::zeros((n_classes, dim)),
            a,
            curvature,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    /// Anchor point of class `k`.
    pub fn anchor(&self, k: usize) -> PoincarePoint {
        let raw = self.p_raw.row(k).to_vec();
        geometry::exp_map(&raw, self.curvature).expect("finite parameters")
    }

    /// Re-draws any normal that collapsed below [`MIN_NORMAL_NORM`].
    /// Returns the number of rows replaced.
    pub fn repair_normals<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let dim = self.dim();
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let mut fixed = 0;
        for mut row in self.a.rows_mut() {
            if row.dot(&row).sqrt() < MIN_NORMAL_NORM {
                row.iter_mut().for_each(|v| *v = normal.sample(rng));
                fixed += 1;
            }
        }
        fixed
    }
}

/// Unnormalized class scores for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits(pub Vec<f64>);

impl ClassLogits {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.0)
    }

    /// Index of the largest logit; lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Hyperbolic MLR logits for a single point.
///
/// Evaluated literally as `sign(⟨m, a⟩)·‖a‖·d(z, H)`; the training kernels use an
/// equivalent closed form and are checked against this.
pub fn mlr_logits(z: &PoincarePoint, params: &MlrParams) -> Result<ClassLogits> {
    if z.curvature() != params.curvature {
        return Err(Error::Contract("point and MLR head differ in curvature".into()));
    }
    if z.dim() != params.dim() {
        return Err(Error::Contract(format!(
            "point has dim {}, head expects {}",
            z.dim(),
            params.dim()
        )));
    }
    let mut logits = Vec::with_capacity(params.n_classes());
    for k in 0..params.n_classes() {
        let p = params.anchor(k);
        let a = params.a.row(k).to_vec();
        let m = mobius_add(&p.neg(), z)?;
        let sign = if dot(m.coords(), &a) >= 0.0 { 1.0 } else { -1.0 };
        let dist = hyperplane_distance(z, &p, &a)?;
        logits.push(sign * norm_sq(&a).sqrt() * dist);
    }
    Ok(ClassLogits(logits))
}

/// Mean cross-entropy of `logits` against 0-based `labels`.
pub fn classification_loss(logits: &[ClassLogits], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Contract(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.0.len() {
            return Err(Error::Contract(format!(
                "label {y} out of range for {} classes",
                row.0.len()
            )));
        }
        total += log_sum_exp(&row.0) - row.0[y];
    }
    Ok(total / labels.len() as f64)
}

/// Cross-entropy over a logits matrix; returns the loss and `∂loss/∂logits`.
pub(crate) fn cross_entropy_with_grad(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    let k = logits.ncols();
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("label {y} out of range for {k} classes")));
        }
        let row = logits.row(i).to_vec();
        total += log_sum_exp(&row) - row[y];
        let probs = softmax(&row);
        for (j, p) in probs.into_iter().enumerate() {
            grad[[i, j]] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Per-class quantities shared between forward and backward passes.
pub(crate) struct Anchors {
    /// `-exp_map(p_raw_k)`, row per class.
    neg_p: Vec<Vec<f64>>,
}

impl Anchors {
    pub(crate) fn new(params: &MlrParams) -> Self {
        let c = params.curvature;
        let neg_p = params
            .p_raw
            .rows()
            .into_iter()
            .map(|row| {
                let mut p = vec![0.0; row.len()];
                exp_map_into(row.as_slice().expect("contiguous"), c, &mut p);
                p.iter_mut().for_each(|v| *v = -*v);
                p
            })
            .collect();
        Anchors { neg_p }
    }
}

/// Closed-form logit `(‖a‖/√c)·asinh(2√c⟨m,a⟩ / ((1 − c‖m‖²)‖a‖))`.
fn logit_parts(m: &[f64], a: ArrayView1<f64>, c: Curvature) -> (f64, f64, f64, f64, f64) {
    let s = c.sqrt();
    let a = a.as_slice().expect("contiguous");
    let a_norm = norm_sq(a).sqrt();
    let lambda = 1.0 - c.value() * norm_sq(m);
    let proj = dot(m, a);
    let arg = 2.0 * s * proj / (lambda * a_norm);
    (a_norm / s * arg.asinh(), arg, a_norm, lambda, proj)
}

/// Logits for a batch of embedded points (rows of `z`).
pub(crate) fn batch_logits(z: &Array2<f64>, params: &MlrParams, anchors: &Anchors) -> Array2<f64> {
    let c = params.curvature;
    let mut out = Array2::zeros((z.nrows(), params.n_classes()));
    let mut m = vec![0.0; params.dim()];
    for (i, zi) in z.rows().into_iter().enumerate() {
        let zi = zi.as_slice().expect("contiguous");
        for k in 0..params.n_classes() {
            mobius_add_raw(&anchors.neg_p[k], zi, c, &mut m);
            geometry::clip_in_place(&mut m, c);
            out[[i, k]] = logit_parts(&m, params.a.row(k), c).0;
        }
    }
    out
}

/// Backward pass of [`batch_logits`]: accumulates into `grad_p_raw`/`grad_a`
/// and returns `∂loss/∂z`.
pub(crate) fn batch_logits_backward(
    z: &Array2<f64>,
    params: &MlrParams,
    anchors: &Anchors,
    grad_logits: &Array2<f64>,
    grad_p_raw: &mut Array2<f64>,
    grad_a: &mut Array2<f64>,
) -> Array2<f64> {
    let c = params.curvature;
    let s = c.sqrt();
    let dim = params.dim();
    let mut grad_z = Array2::zeros(z.raw_dim());
    let mut grad_p: Vec<Array1<f64>> = vec![Array1::zeros(dim); params.n_classes()];
    let mut m = vec![0.0; dim];
    for (i, zi) in z.rows().into_iter().enumerate() {
        let zi = zi.as_slice().expect("contiguous");
        for k in 0..params.n_classes() {
            let g = grad_logits[[i, k]];
            if g == 0.0 {
                continue;
            }
            let u = &anchors.neg_p[k];
            mobius_add_raw(u, zi, c, &mut m);
            geometry::clip_in_place(&mut m, c);
            let a = params.a.row(k);
            let (_, arg, a_norm, lambda, proj) = logit_parts(&m, a, c);
            let g_arg = g * a_norm / s / (1.0 + arg * arg).sqrt();
            let asinh = arg.asinh();

            let coef_a = 2.0 * s / (lambda * a_norm);
            let coef_m = 4.0 * s * proj * c.value() / (lambda * lambda * a_norm);
            let grad_m: Vec<f64> = m
                .iter()
                .zip(a.iter())
                .map(|(mj, aj)| g_arg * (coef_a * aj + coef_m * mj))
                .collect();

            let a3 = a_norm * a_norm * a_norm;
            for (j, aj) in a.iter().enumerate() {
                grad_a[[k, j]] += g * asinh / s * aj / a_norm
                    + g_arg * (2.0 * s * m[j] / (lambda * a_norm) - 2.0 * s * proj * aj / (lambda * a3));
            }

            let (gu, gz) = mobius_add_backward(u, zi, c, &grad_m);
            for j in 0..dim {
                grad_z[[i, j]] += gz[j];
                // u = -p
                grad_p[k][j] -= gu[j];
            }
        }
    }
    for (k, gp) in grad_p.iter().enumerate() {
        let raw = params.p_raw.row(k);
        let g = exp_map_backward(raw.as_slice().expect("contiguous"), c, gp.as_slice().unwrap());
        for j in 0..dim {
            grad_p_raw[[k, j]] += g[j];
        }
    }
    grad_z
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_1d() -> MlrParams {
        MlrParams {
            p_raw: array![[0.0, 0.0]],
            a: array![[1.0, 0.0]],
            curvature: Curvature::new(1.0).unwrap(),
        }
    }

    #[test]
    fn logit_of_composed_example() {
        let params = params_1d();
        let z = PoincarePoint::new(vec![0.5, 0.0], params.curvature).unwrap();
        let l = mlr_logits(&z, &params).unwrap();
        assert!((l.0[0] - 1.098_612_288_668_109_8).abs() < 1e-12);
    }

    #[test]
    fn logit_zero_at_anchor_and_sign_flip() {
        let c = Curvature::new(1.0).unwrap();
        let mut params = MlrParams {
            p_raw: array![[0.3, -0.2]],
            a: array![[0.4, 0.9]],
            curvature: c,
        };
        let anchor = params.anchor(0);
        assert!(mlr_logits(&anchor, &params).unwrap().0[0].abs() < 1e-12);

        let z = PoincarePoint::new(vec![-0.1, 0.5], c).unwrap();
        let pos = mlr_logits(&z, &params).unwrap().0[0];
        params.a.mapv_inplace(|v| -v);
        let neg = mlr_logits(&z, &params).unwrap().0[0];
        assert!((pos + neg).abs() < 1e-12);
        assert!(pos != 0.0);
    }

    #[test]
    fn degenerate_normal_is_an_error() {
        let mut params = params_1d();
        params.a.fill(0.0);
        let z = PoincarePoint::new(vec![0.5, 0.0], params.curvature).unwrap();
        assert!(matches!(mlr_logits(&z, &params), Err(Error::DegenerateHyperplane)));
    }

    #[test]
    fn cross_entropy_examples() {
        let sat = classification_loss(&[ClassLogits(vec![1e6, 0.0, 0.0])], &[0]).unwrap();
        assert!(sat.abs() < 1e-12);
        let uniform = classification_loss(&[ClassLogits(vec![0.0; 4])], &[2]).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-15);
        let two = classification_loss(&[ClassLogits(vec![1.0, 0.0])], &[0]).unwrap();
        let e = std::f64::consts::E;
        assert!((two - (-(e / (e + 1.0)).ln())).abs() < 1e-15);
        assert!((two - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(matches!(
            classification_loss(&[ClassLogits(vec![0.0, 0.0])], &[2]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let l = [3.0, -1.0, 0.5, 10.0];
        let p = softmax(&l);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = l.iter().map(|v| v + 123.0).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_kernel_agrees_with_literal_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = Curvature::new(0.5).unwrap();
        let mut params = MlrParams::init(3, 4, c, &mut rng);
        params.p_raw = array![[0.2, -0.1, 0.4, 0.0], [0.0, 0.3, -0.2, 0.1], [-0.5, 0.0, 0.0, 0.2]];
        let z = array![[0.1, 0.2, -0.3, 0.4], [-0.6, 0.1, 0.2, 0.0]];
        let anchors = Anchors::new(&params);
        let fast = batch_logits(&z, &params, &anchors);
        for i in 0..2 {
            let p = PoincarePoint::new(z.row(i).to_vec(), c).unwrap();
            let slow = mlr_logits(&p, &params).unwrap();
            for k in 0..3 {
                assert!((fast[[i, k]] - slow.0[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn repair_replaces_collapsed_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = MlrParams::init(2, 3, Curvature::default(), &mut rng);
        params.a.row_mut(1).fill(1e-12);
        assert_eq!(params.repair_normals(&mut rng), 1);
        assert!(params.a.row(1).dot(&params.a.row(1)) > 0.0);
    }
}
