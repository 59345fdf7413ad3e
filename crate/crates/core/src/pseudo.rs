//! Fine-grained pseudo-labels from per-coarse-class feature memories.
//!
//! Each coarse class keeps a ring buffer of its most recent unit-normalized
//! features. Spherical k-means over a buffer yields centroids whose indices
//! serve as fine pseudo-labels inside that coarse class.

use std::collections::VecDeque;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{dot, norm_sq};

pub const DEFAULT_MEMORY: usize = 256;
pub const MAX_LLOYD_ITERS: usize = 100;
/// Seeded restarts per class; the best objective wins.
pub const DEFAULT_RESTARTS: usize = 16;

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm_sq(v).sqrt();
    if n > 0.0 && n.is_finite() {
        Ok(v.iter().map(|x| x / n).collect())
    } else {
        Err(Error::InvalidInput("cannot normalize a zero or non-finite feature".into()))
    }
}

/// Per-coarse-class ring buffers of unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    groups: Vec<VecDeque<Vec<f64>>>,
}

impl MemoryBank {
    pub fn new(n_coarse: usize, capacity: usize) -> Self {
        MemoryBank {
            capacity,
            groups: vec![VecDeque::with_capacity(capacity); n_coarse],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_coarse(&self) -> usize {
        self.groups.len()
    }

    /// Stored vectors of one class, oldest first.
    pub fn group(&self, coarse: usize) -> impl Iterator<Item = &[f64]> {
        self.groups[coarse].iter().map(Vec::as_slice)
    }

    pub fn group_len(&self, coarse: usize) -> usize {
        self.groups[coarse].len()
    }

    /// Normalizes each feature and appends it to its class buffer, evicting the
    /// oldest entries beyond capacity.
    pub fn push<'a, I>(&mut self, features: I, coarse: &[usize]) -> Result<()>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let features: Vec<&[f64]> = features.into_iter().collect();
        if features.len() != coarse.len() {
            return Err(Error::Contract(format!(
                "{} features with {} labels",
                features.len(),
                coarse.len()
            )));
        }
        if let Some(&bad) = coarse.iter().find(|&&c| c >= self.groups.len()) {
            return Err(Error::Contract(format!(
                "unknown coarse label {bad} (bank has {} classes)",
                self.groups.len()
            )));
        }
        let normalized = features.iter().map(|f| unit(f)).collect::<Result<Vec<_>>>()?;
        for (v, &c) in normalized.into_iter().zip(coarse) {
            let group = &mut self.groups[c];
            if group.len() == self.capacity {
                group.pop_front();
            }
            if self.capacity > 0 {
                group.push_back(v);
            }
        }
        Ok(())
    }
}

/// Result of one spherical k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum over points of the cosine to their assigned centroid.
    pub objective: f64,
    /// Objective after each assignment step.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Index of the centroid with the highest cosine; lowest index on ties.
pub fn nearest_centroid(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let s = dot(x, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn plusplus_seed<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| (1.0 - nearest_centroid(p, &centroids).1).max(0.0))
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }
    centroids
}

/// Single-point moves between clusters while any strictly raises
/// `Σ_j ‖S_j‖`, the objective at optimal centroids. Returns whether anything moved.
fn transfer_refine(points: &[Vec<f64>], assignments: &mut [usize], k: usize) -> bool {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &j) in points.iter().zip(assignments.iter()) {
        counts[j] += 1;
        sums[j].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    let shifted = |s: &[f64], p: &[f64], sign: f64| -> f64 {
        s.iter().zip(p).map(|(a, b)| (a + sign * b).powi(2)).sum::<f64>().sqrt()
    };
    let mut moved = false;
    for _ in 0..MAX_LLOYD_ITERS {
        let mut improved = false;
        for (i, p) in points.iter().enumerate() {
            let from = assignments[i];
            if counts[from] == 1 {
                continue;
            }
            let loss = norm_sq(&sums[from]).sqrt() - shifted(&sums[from], p, -1.0);
            let mut best = (from, 1e-12);
            for to in (0..k).filter(|&t| t != from) {
                let gain = shifted(&sums[to], p, 1.0) - norm_sq(&sums[to]).sqrt() - loss;
                if gain > best.1 {
                    best = (to, gain);
                }
            }
            if best.0 != from {
                let to = best.0;
                sums[from].iter_mut().zip(p).for_each(|(s, x)| *s -= x);
                sums[to].iter_mut().zip(p).for_each(|(s, x)| *s += x);
                counts[from] -= 1;
                counts[to] += 1;
                assignments[i] = to;
                improved = true;
                moved = true;
            }
        }
        if !improved {
            break;
        }
    }
    moved
}

/// Lloyd iterations on the unit sphere from a k-means++ start, then
/// single-point transfers until none improves the objective.
///
/// Stops at an assignment fixed point or after [`MAX_LLOYD_ITERS`] rounds.
/// Empty clusters are re-seeded at most once per run, from the point worst
/// served by its current centroid.
pub fn spherical_kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> KMeansFit {
    assert!(k >= 1 && points.len() >= k, "need at least k points");
    let dim = points[0].len();
    let mut centroids = plusplus_seed(points, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut reseeded = false;
    let mut iterations = 0;

    for _ in 0..MAX_LLOYD_ITERS {
        iterations += 1;
        let (next, obj): (Vec<usize>, f64) = {
            let mut total = 0.0;
            let a = points
                .iter()
                .map(|p| {
                    let (j, s) = nearest_centroid(p, &centroids);
                    total += s;
                    j
                })
                .collect();
            (a, total)
        };
        trace.push(obj);
        if next == assignments {
            break;
        }
        assignments = next;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] > 0 {
                if let Ok(u) = unit(&sums[j]) {
                    centroids[j] = u;
                }
            }
        }
        if !reseeded && counts.contains(&0) {
            reseeded = true;
            let mut order: Vec<usize> = (0..points.len()).collect();
            let fit = |i: usize| dot(&points[i], &centroids[assignments[i]]);
            order.sort_by(|&a, &b| fit(a).total_cmp(&fit(b)).then(a.cmp(&b)));
            let mut donors = order.into_iter();
            for j in 0..k {
                if counts[j] == 0 {
                    if let Some(i) = donors.next() {
                        centroids[j] = points[i].clone();
                    }
                }
            }
        }
    }

    if transfer_refine(points, &mut assignments, k) {
        for (j, c) in centroids.iter_mut().enumerate() {
            let mut sum = vec![0.0; dim];
            for (p, _) in points.iter().zip(&assignments).filter(|(_, &a)| a == j) {
                sum.iter_mut().zip(p).for_each(|(s, x)| *s += x);
            }
            if let Ok(u) = unit(&sum) {
                *c = u;
            }
        }
    }
    let objective = points
        .iter()
        .zip(&assignments)
        .map(|(p, &j)| dot(p, &centroids[j]))
        .sum();
    trace.push(objective);
    KMeansFit {
        centroids,
        assignments,
        objective,
        trace,
        iterations,
    }
}

/// Best of `restarts` seeded runs (first wins on equal objective).
pub fn spherical_kmeans_restarts<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    rng: &mut R,
) -> KMeansFit {
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let fit = spherical_kmeans(points, k, rng);
        if best.as_ref().is_none_or(|b| fit.objective > b.objective + 1e-12) {
            best = Some(fit);
        }
    }
    best.expect("at least one restart")
}

/// Centroids per coarse class; `None` where the class had fewer than `k` samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterModel {
    pub k_clusters: usize,
    pub classes: Vec<Option<Vec<Vec<f64>>>>,
}

impl ClusterModel {
    /// A model with no class clustered yet.
    pub fn empty(n_coarse: usize, k_clusters: usize) -> Self {
        ClusterModel {
            k_clusters,
            classes: vec![None; n_coarse],
        }
    }

    pub fn centroids(&self, coarse: usize) -> Option<&[Vec<f64>]> {
        self.classes.get(coarse).and_then(|c| c.as_deref())
    }
}

/// Clusters every class buffer independently. Each class draws from its own
/// ChaCha stream keyed by `seed`, so results do not depend on thread count.
pub fn recluster(bank: &MemoryBank, k_clusters: usize, restarts: usize, seed: u64) -> ClusterModel {
    let k = k_clusters.max(1);
    let classes = (0..bank.n_coarse())
        .into_par_iter()
        .map(|c| {
            if bank.group_len(c) < k {
                return None;
            }
            let points: Vec<Vec<f64>> = bank.group(c).map(<[f64]>::to_vec).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            Some(spherical_kmeans_restarts(&points, k, restarts, &mut rng).centroids)
        })
        .collect();
    ClusterModel {
        k_clusters: k,
        classes,
    }
}

/// Nearest-centroid pseudo-label for each feature within its own coarse class.
pub fn assign_pseudo<'a, I>(features: I, coarse: &[usize], model: &ClusterModel) -> Result<Vec<Option<usize>>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    features
        .into_iter()
        .zip(coarse)
        .map(|(f, &c)| {
            let u = unit(f)?;
            Ok(model.centroids(c).map(|cs| nearest_centroid(&u, cs).0))
        })
        .collect()
}
