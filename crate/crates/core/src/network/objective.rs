//! The training objective `L = L_cls + α·L_hcm` and its exact gradient.

use ndarray::{Array2, Axis};

use super::{ForwardCache, Gradients, Head, Model};
use crate::error::{Error, Result};
use crate::geometry::{exp_map_backward, exp_map_into};
use crate::hcm::{self, LabelTriple, TargetDistances};
use crate::mlr::{self, Anchors};

/// Intentional backward-pass defects, used to prove the gradient checker bites.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Treat the exponential map as the identity in the backward pass.
    IdentityExpMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    /// Whether the hierarchical cosine margin term participates at all.
    pub hcm: bool,
    #[doc(hidden)]
    pub fault: Option<BackwardFault>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: hcm::DEFAULT_ALPHA,
            hcm: true,
            fault: None,
        }
    }
}

/// Forward activations of both augmented views.
#[derive(Debug, Clone)]
pub struct PairForward {
    q: ForwardCache,
    k: ForwardCache,
}

impl PairForward {
    pub fn new(model: &Model, xq: &Array2<f64>, xk: &Array2<f64>) -> Result<Self> {
        if xq.nrows() != xk.nrows() {
            return Err(Error::Contract("views have different batch sizes".into()));
        }
        Ok(PairForward {
            q: model.forward(xq)?,
            k: model.forward(xk)?,
        })
    }

    pub fn q_features(&self) -> &Array2<f64> {
        self.q.projector_out()
    }

    pub fn k_features(&self) -> &Array2<f64> {
        self.k.projector_out()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub l_cls: f64,
    /// Zero when the margin term is disabled.
    pub l_hcm: f64,
    pub total: f64,
    /// Q-branch samples whose arg-max coarse prediction is right.
    pub correct: usize,
    /// The cosine distance matrix `W`, when the margin term ran.
    pub distances: Option<Array2<f64>>,
}

fn check_finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term: term.into() })
    }
}

/// Evaluates the objective on one batch, optionally with gradients for every
/// parameter in [`Model::params`] order. `labels[i]` describes sample `i` in
/// both views.
pub fn compute_loss(
    model: &Model,
    fwd: &PairForward,
    labels: &[LabelTriple],
    targets: &TargetDistances,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossOutput, Option<Gradients>)> {
    let q = fwd.q_features();
    let k = fwd.k_features();
    let n = q.nrows();
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for a batch of {n}", labels.len())));
    }
    let coarse: Vec<usize> = labels.iter().map(|l| l.coarse).collect();
    let mut grads = want_grad.then(|| model.zero_grads());
    let n_params = model.params().len();

    // Classification branch on Q.
    let (l_cls, correct, grad_q_cls) = match &model.head {
        Head::Hyperbolic(params) => {
            let c = params.curvature;
            let mut z = Array2::zeros(q.raw_dim());
            for (zi, qi) in z.rows_mut().into_iter().zip(q.rows()) {
                exp_map_into(qi.as_slice().expect("contiguous"), c, zi.into_slice().expect("contiguous"));
            }
            let anchors = Anchors::new(params);
            let logits = mlr::batch_logits(&z, params, &anchors);
            let (loss, grad_logits) = mlr::cross_entropy_with_grad(&logits, &coarse)?;
            let correct = count_correct(&logits, &coarse);
            let grad_q = grads.as_mut().map(|g| {
                let (head_grads, _) = g.0.split_at_mut(n_params);
                let (gp, ga) = head_grads[n_params - 2..].split_at_mut(1);
                let grad_z =
                    mlr::batch_logits_backward(&z, params, &anchors, &grad_logits, &mut gp[0], &mut ga[0]);
                let mut grad_q = Array2::zeros(q.raw_dim());
                for ((gq, qi), gz) in grad_q.rows_mut().into_iter().zip(q.rows()).zip(grad_z.rows()) {
                    let gz = gz.as_slice().expect("contiguous");
                    let back = match cfg.fault {
                        Some(BackwardFault::IdentityExpMap) => gz.to_vec(),
                        None => exp_map_backward(qi.as_slice().expect("contiguous"), c, gz),
                    };
                    gq.into_slice().expect("contiguous").copy_from_slice(&back);
                }
                grad_q
            });
            (loss, correct, grad_q)
        }
        Head::Linear(layer) => {
            let logits = layer.forward(q);
            let (loss, grad_logits) = mlr::cross_entropy_with_grad(&logits, &coarse)?;
            let correct = count_correct(&logits, &coarse);
            let grad_q = grads.as_mut().map(|g| {
                g.0[n_params - 2] += &q.t().dot(&grad_logits);
                g.0[n_params - 1] += &grad_logits.sum_axis(Axis(0)).insert_axis(Axis(0));
                grad_logits.dot(&layer.weight.t())
            });
            (loss, correct, grad_q)
        }
    };
    check_finite(l_cls, "L_cls")?;

    // Hierarchical cosine margins between Q and K.
    let mut grad_k = None;
    let mut grad_q = grad_q_cls;
    let (l_hcm, distances) = if cfg.hcm {
        let w = hcm::distance_matrix(q, k)?;
        let m = hcm::target_matrix(labels, labels, targets);
        let (l_hcm, grad_w) = hcm::hcm_loss_with_grad(&w, &m)?;
        check_finite(l_hcm, "L_hcm")?;
        if let Some(gq) = grad_q.as_mut() {
            if cfg.alpha != 0.0 {
                let (dq, dk) = hcm::distance_matrix_backward(q, k, &(grad_w * cfg.alpha))?;
                *gq += &dq;
                grad_k = Some(dk);
            }
        }
        (l_hcm, Some(w))
    } else {
        (0.0, None)
    };

    let total = check_finite(
        hcm::total_loss(l_cls, if cfg.hcm { l_hcm } else { 0.0 }, cfg.alpha)?,
        "total loss",
    )?;

    if let (Some(g), Some(gq)) = (grads.as_mut(), grad_q) {
        model.backward(&fwd.q, gq, g);
        if let Some(gk) = grad_k {
            model.backward(&fwd.k, gk, g);
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { term: "gradients".into() });
        }
    }

    Ok((
        LossOutput {
            l_cls,
            l_hcm,
            total,
            correct,
            distances,
        },
        grads,
    ))
}

fn count_correct(logits: &Array2<f64>, labels: &[usize]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| mlr::argmax(row.as_slice().expect("contiguous")) == y)
        .count()
}
