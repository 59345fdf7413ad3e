//! Hierarchical cosine margins.
//!
//! Pairwise cosine distances between the two views of a batch are pushed
//! toward a four-level target ladder (same instance, same fine pseudo-class,
//! same coarse class, different coarse class) with a row-wise KL divergence.
//! The two middle rungs of the ladder follow the batch statistics through a
//! momentum update.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{dot, norm_sq};

/// Floor added to every distance before row normalization.
pub const EPS_KL: f64 = 1e-8;

/// 1 − cos 30°, rounded.
pub const D1_INIT: f64 = 0.134;
/// 1 − cos 60°.
pub const D2_INIT: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.999;
pub const DEFAULT_ALPHA: f64 = 800.0;

/// Instance, fine pseudo-label and coarse label of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabelTriple {
    pub instance_id: u64,
    /// Cluster index within the coarse class, if a cluster model exists.
    pub fine_pseudo: Option<usize>,
    pub coarse: usize,
}

/// Which rung of the ladder a pair falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    SameInstance,
    SameFine,
    SameCoarse,
    DifferentCoarse,
}

impl Stratum {
    pub fn of(a: &LabelTriple, b: &LabelTriple) -> Stratum {
        if a.instance_id == b.instance_id {
            Stratum::SameInstance
        } else if a.coarse == b.coarse && a.fine_pseudo.is_some() && a.fine_pseudo == b.fine_pseudo {
            Stratum::SameFine
        } else if a.coarse == b.coarse {
            Stratum::SameCoarse
        } else {
            Stratum::DifferentCoarse
        }
    }
}

/// Target ladder `(d0, d1, d2, d3)` plus the momentum used to adapt `d1`, `d2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetDistances {
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub beta: f64,
}

impl Default for TargetDistances {
    fn default() -> Self {
        TargetDistances::new(DEFAULT_BETA)
    }
}

impl TargetDistances {
    pub fn new(beta: f64) -> Self {
        TargetDistances {
            d0: 0.0,
            d1: D1_INIT,
            d2: D2_INIT,
            d3: 1.0,
            beta,
        }
    }

    pub fn target(&self, stratum: Stratum) -> f64 {
        match stratum {
            Stratum::SameInstance => self.d0,
            Stratum::SameFine => self.d1,
            Stratum::SameCoarse => self.d2,
            Stratum::DifferentCoarse => self.d3,
        }
    }

    /// Resets the adaptive rungs if `epoch` is a reinitialization epoch.
    pub fn begin_epoch(&mut self, epoch: usize, reinit_epochs: &[usize]) -> bool {
        if reinit_epochs.contains(&epoch) {
            self.d1 = D1_INIT;
            self.d2 = D2_INIT;
            true
        } else {
            false
        }
    }

    /// `d_l ← β·d_l + (1−β)·d̄_l` for each present batch mean.
    pub fn momentum_update(&mut self, means: StratumMeans) {
        let beta = self.beta;
        if let Some(m) = means.d1 {
            self.d1 = beta * self.d1 + (1.0 - beta) * m;
        }
        if let Some(m) = means.d2 {
            self.d2 = beta * self.d2 + (1.0 - beta) * m;
        }
    }
}

/// Batch averages of the observed distances per adaptive stratum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StratumMeans {
    pub d1: Option<f64>,
    pub d2: Option<f64>,
}

/// One AHCD step: the reinitialization check for `epoch` (when this is the
/// epoch's first batch), followed by the momentum update.
pub fn ahcd_update(
    t: &TargetDistances,
    means: StratumMeans,
    epoch: usize,
    reinit_epochs: &[usize],
    epoch_start: bool,
) -> Result<TargetDistances> {
    if !(t.beta > 0.0 && t.beta < 1.0) {
        return Err(Error::InvalidInput(format!("beta must lie in (0, 1), got {}", t.beta)));
    }
    let mut next = *t;
    if epoch_start {
        next.begin_epoch(epoch, reinit_epochs);
    }
    next.momentum_update(means);
    Ok(next)
}

/// `1 − ⟨u,v⟩/(‖u‖‖v‖)`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract("cosine distance of vectors with different lengths".into()));
    }
    let (nu2, nv2) = (norm_sq(u), norm_sq(v));
    if nu2 == 0.0 || nv2 == 0.0 || !nu2.is_finite() || !nv2.is_finite() {
        return Err(Error::InvalidInput("cosine distance needs finite nonzero vectors".into()));
    }
    Ok((1.0 - dot(u, v) / (nu2 * nv2).sqrt()).clamp(0.0, 2.0))
}

/// `W[i][j] = d_cos(q_i, k_j)` for rows of `q` and `k`.
pub fn distance_matrix(q: &Array2<f64>, k: &Array2<f64>) -> Result<Array2<f64>> {
    if q.nrows() != k.nrows() || q.ncols() != k.ncols() {
        return Err(Error::Contract(format!(
            "distance matrix of {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let qn = row_norms(q)?;
    let kn = row_norms(k)?;
    let gram = q.dot(&k.t());
    let mut w = Array2::zeros(gram.raw_dim());
    for ((i, j), g) in gram.indexed_iter() {
        w[[i, j]] = (1.0 - g / (qn[i] * kn[j])).clamp(0.0, 2.0);
    }
    Ok(w)
}

fn row_norms(x: &Array2<f64>) -> Result<Vec<f64>> {
    x.rows()
        .into_iter()
        .map(|r| {
            let n = r.dot(&r).sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::InvalidInput("feature row has zero or non-finite norm".into()))
            }
        })
        .collect()
}

/// Gradients of `Σ grad_w[i][j]·W[i][j]` with respect to `q` and `k`.
pub(crate) fn distance_matrix_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    grad_w: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let qn = row_norms(q)?;
    let kn = row_norms(k)?;
    let qhat = normalize_rows(q, &qn);
    let khat = normalize_rows(k, &kn);
    let cos = qhat.dot(&khat.t());
    // ∂cos(q,k)/∂q = (k̂ − cos·q̂)/‖q‖ and dW = −dcos.
    let g = -grad_w;
    let mut grad_q = g.dot(&khat);
    let mut grad_k = g.t().dot(&qhat);
    let row_q: Vec<f64> = (0..q.nrows()).map(|i| g.row(i).dot(&cos.row(i))).collect();
    let row_k: Vec<f64> = (0..k.nrows()).map(|j| g.column(j).dot(&cos.column(j))).collect();
    for i in 0..q.nrows() {
        for d in 0..q.ncols() {
            grad_q[[i, d]] = (grad_q[[i, d]] - row_q[i] * qhat[[i, d]]) / qn[i];
        }
    }
    for j in 0..k.nrows() {
        for d in 0..k.ncols() {
            grad_k[[j, d]] = (grad_k[[j, d]] - row_k[j] * khat[[j, d]]) / kn[j];
        }
    }
    Ok((grad_q, grad_k))
}

fn normalize_rows(x: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut out = x.clone();
    for (mut row, n) in out.rows_mut().into_iter().zip(norms) {
        row.mapv_inplace(|v| v / n);
    }
    out
}

/// `M[i][j]` from the ladder applied to `(labels_q[i], labels_k[j])`.
pub fn target_matrix(
    labels_q: &[LabelTriple],
    labels_k: &[LabelTriple],
    t: &TargetDistances,
) -> Array2<f64> {
    Array2::from_shape_fn((labels_q.len(), labels_k.len()), |(i, j)| {
        t.target(Stratum::of(&labels_q[i], &labels_k[j]))
    })
}

fn normalized_row(row: ndarray::ArrayView1<f64>) -> (Vec<f64>, f64) {
    let sum: f64 = row.iter().map(|v| v + EPS_KL).sum();
    (row.iter().map(|v| (v + EPS_KL) / sum).collect(), sum)
}

/// Mean over rows of `KL(m̂_i ‖ ŵ_i)`, rows normalized after an `EPS_KL` floor.
pub fn hcm_loss(w: &Array2<f64>, m: &Array2<f64>) -> Result<f64> {
    hcm_loss_with_grad(w, m).map(|(l, _)| l)
}

/// [`hcm_loss`] together with `∂loss/∂W`. `M` is treated as a constant.
pub(crate) fn hcm_loss_with_grad(w: &Array2<f64>, m: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if w.shape() != m.shape() || w.nrows() == 0 {
        return Err(Error::Contract(format!(
            "hcm loss shapes {:?} and {:?}",
            w.shape(),
            m.shape()
        )));
    }
    let n = w.nrows() as f64;
    let mut grad = Array2::zeros(w.raw_dim());
    let mut total = 0.0;
    for i in 0..w.nrows() {
        let (mh, _) = normalized_row(m.row(i));
        let (wh, wsum) = normalized_row(w.row(i));
        total += mh
            .iter()
            .zip(&wh)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p / q).ln())
            .sum::<f64>();
        // ∂/∂W_ij of −Σ_l m̂_l ln ŵ_l, using Σ m̂ = 1.
        for j in 0..w.ncols() {
            grad[[i, j]] = (1.0 / wsum - mh[j] / (w[[i, j]] + EPS_KL)) / n;
        }
    }
    Ok((total / n, grad))
}

/// `L_cls + α·L_hcm`.
pub fn total_loss(l_cls: f64, l_hcm: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be nonnegative, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(l_cls);
    }
    Ok(l_cls + alpha * l_hcm)
}

/// Averages of `W` over the same-fine and same-coarse strata, excluding
/// same-instance pairs.
pub fn batch_stratum_means(
    w: &Array2<f64>,
    labels_q: &[LabelTriple],
    labels_k: &[LabelTriple],
) -> StratumMeans {
    let (mut s1, mut n1, mut s2, mut n2) = (0.0, 0usize, 0.0, 0usize);
    for (i, lq) in labels_q.iter().enumerate() {
        for (j, lk) in labels_k.iter().enumerate() {
            match Stratum::of(lq, lk) {
                Stratum::SameFine => {
                    s1 += w[[i, j]];
                    n1 += 1;
                }
                Stratum::SameCoarse => {
                    s2 += w[[i, j]];
                    n2 += 1;
                }
                _ => {}
            }
        }
    }
    StratumMeans {
        d1: (n1 > 0).then(|| s1 / n1 as f64),
        d2: (n2 > 0).then(|| s2 / n2 as f64),
    }
}
