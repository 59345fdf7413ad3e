//! Central finite-difference verification of analytic gradients.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::objective::{compute_loss, BackwardFault, LossConfig, PairForward};
use super::{Gradients, MlpSpec, Model, NetworkSpec, Space};
use crate::error::{Error, Result};
use crate::geometry::Curvature;
use crate::hcm::{LabelTriple, TargetDistances};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor for relative error, as a fraction of the loss magnitude.
/// Entries whose true gradient is below this level are compared absolutely,
/// because central differences cannot resolve them past round-off.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub step: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` for every entry
/// of every parameter tensor.
pub fn check_gradients<F>(model: &Model, analytic: &Gradients, loss: F, step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&Model) -> f64,
{
    let base = loss(model);
    let floor = RELATIVE_FLOOR * base.abs().max(1.0);
    let names = model.param_names();
    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(names.len());
    for (t, name) in names.into_iter().enumerate() {
        let shape = analytic.0[t].raw_dim();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for idx in ndarray::indices(shape) {
            let original = probe.params()[t][idx];
            probe.params_mut()[t][idx] = original + step;
            let plus = loss(&probe);
            probe.params_mut()[t][idx] = original - step;
            let minus = loss(&probe);
            probe.params_mut()[t][idx] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.0[t][idx];
            max_rel = max_rel.max(relative_error(a, numeric, floor));
            max_abs = max_abs.max((a - numeric).abs());
        }
        groups.push(GroupReport {
            name,
            entries: analytic.0[t].len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    GradCheckReport {
        groups,
        max_rel_err,
        tolerance,
        step,
        passed: max_rel_err < tolerance,
    }
}

/// Checks the full training objective on one fixed batch. Pseudo-labels are
/// frozen in `labels`, so the loss is smooth in the parameters.
#[allow(clippy::too_many_arguments)]
pub fn check_objective(
    model: &Model,
    xq: &Array2<f64>,
    xk: &Array2<f64>,
    labels: &[LabelTriple],
    targets: &TargetDistances,
    cfg: &LossConfig,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let fwd = PairForward::new(model, xq, xk)?;
    let (_, grads) = compute_loss(model, &fwd, labels, targets, cfg, true)?;
    let grads = grads.expect("requested gradients");
    // Finite differences never use the injected fault: they see the true loss.
    let clean = LossConfig { fault: None, ..*cfg };
    let loss = |m: &Model| {
        let fwd = PairForward::new(m, xq, xk).expect("shapes already validated");
        compute_loss(m, &fwd, labels, targets, &clean, false)
            .map(|(out, _)| out.total)
            .unwrap_or(f64::NAN)
    };
    Ok(check_gradients(model, &grads, loss, step, tolerance))
}

fn smooth_at(model: &Model, x: &Array2<f64>, c: Curvature) -> Result<bool> {
    let cache = model.forward(x)?;
    let n = cache.pre.len();
    let relu_clear = cache.pre[..n - 1].iter().flatten().all(|v| v.abs() > 10.0 * DEFAULT_STEP);
    // exp_map clips once tanh(√c‖x‖) reaches 1 − BALL_EPS, near √c‖x‖ ≈ 6.1.
    let unclipped = cache.pre[n - 1].rows().into_iter().all(|r| c.sqrt() * r.dot(&r).sqrt() < 5.0);
    Ok(relu_clear && unclipped)
}

/// Settings of the built-in tiny problem used by [`check_tiny`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TinyProblem {
    pub alpha: f64,
    pub space: Space,
    pub curvature: f64,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<BackwardFault>,
}

impl Default for TinyProblem {
    fn default() -> Self {
        TinyProblem {
            alpha: crate::hcm::DEFAULT_ALPHA,
            space: Space::Hyperbolic,
            curvature: 0.5,
            seed: 0,
            fault: None,
        }
    }
}

/// Labels of the tiny batch: every ladder stratum appears in `Q × K`.
pub fn tiny_labels() -> Vec<LabelTriple> {
    [(Some(0), 0), (Some(0), 0), (Some(1), 0), (None, 1)]
        .into_iter()
        .enumerate()
        .map(|(i, (fine_pseudo, coarse))| LabelTriple {
            instance_id: i as u64,
            fine_pseudo,
            coarse,
        })
        .collect()
}

/// Finite-difference check of the full objective on a 6 → 8 → 8 → 8 → 5
/// network with 3 coarse classes and a batch of 4.
pub fn check_tiny(problem: &TinyProblem) -> Result<GradCheckReport> {
    let spec = NetworkSpec::new(MlpSpec::new(vec![6, 8])?, MlpSpec::new(vec![8, 8, 5])?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(problem.seed);
    let c = Curvature::new(problem.curvature)?;
    let model = Model::init(spec, 3, problem.space, c, &mut rng);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Redraw until the batch sits away from every ReLU kink and from the
    // clipping radius: central differences straddling a kink are meaningless.
    let mut tries = 0;
    let (xq, xk) = loop {
        tries += 1;
        if tries > 1000 {
            return Err(Error::Contract("no kink-free batch found for the tiny problem".into()));
        }
        let xq = Array2::from_shape_fn((4, 6), |_| 0.5 * normal.sample(&mut rng));
        let xk = xq.mapv(|v| 0.9 * v) + Array2::from_shape_fn((4, 6), |_| 0.05 * normal.sample(&mut rng));
        if smooth_at(&model, &xq, c)? && smooth_at(&model, &xk, c)? {
            break (xq, xk);
        }
    };
    let targets = TargetDistances {
        d1: 0.2,
        d2: 0.45,
        ..TargetDistances::default()
    };
    let cfg = LossConfig {
        alpha: problem.alpha,
        hcm: true,
        fault: problem.fault,
    };
    check_objective(&model, &xq, &xk, &tiny_labels(), &targets, &cfg, DEFAULT_STEP, DEFAULT_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert!((relative_error(1e-12, 0.0, 1e-6) - 1e-6).abs() < 1e-18);
    }
}
