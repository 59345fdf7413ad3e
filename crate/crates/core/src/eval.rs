//! Episodic few-shot evaluation and retrieval metrics on learned embeddings.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{cosine_dist_raw, poincare_distance_raw, Curvature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeMode {
    /// `n_way` fine classes drawn uniformly.
    Standard,
    /// Every fine class.
    AllWay,
    /// All fine classes of one randomly drawn coarse class.
    IntraClass,
}

impl EpisodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeMode::Standard => "standard",
            EpisodeMode::AllWay => "all_way",
            EpisodeMode::IntraClass => "intra_class",
        }
    }
}

impl std::str::FromStr for EpisodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(EpisodeMode::Standard),
            "all_way" | "all-way" => Ok(EpisodeMode::AllWay),
            "intra_class" | "intra-class" | "intra" => Ok(EpisodeMode::IntraClass),
            other => Err(Error::Config(format!("unknown episode mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per class.
    pub n_query: usize,
    pub mode: EpisodeMode,
    pub n_episodes: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            k_shot: 1,
            n_query: 15,
            mode: EpisodeMode::Standard,
            n_episodes: 1000,
        }
    }
}

/// Distance used for nearest-neighbour decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    /// Geodesic distance; embeddings must already be exp-mapped into the ball.
    Poincare(Curvature),
    Cosine,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Poincare(_) => "poincare",
            Metric::Cosine => "cosine",
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Metric::Poincare(c) => poincare_distance_raw(a, b, c),
            Metric::Cosine => cosine_dist_raw(a, b),
        }
    }
}

/// An embedded evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub embedding: Vec<f64>,
    pub fine: usize,
    pub coarse: usize,
    pub instance_id: u64,
}

/// Embedded pool indexed by fine class.
#[derive(Debug, Clone)]
pub struct EvalPool {
    pub points: Vec<EvalPoint>,
    by_fine: BTreeMap<usize, Vec<usize>>,
    /// Fine classes of each coarse class.
    by_coarse: BTreeMap<usize, Vec<usize>>,
}

impl EvalPool {
    pub fn new(points: Vec<EvalPoint>) -> Self {
        let mut by_fine: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut by_coarse: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            by_fine.entry(p.fine).or_default().push(i);
            let fines = by_coarse.entry(p.coarse).or_default();
            if !fines.contains(&p.fine) {
                fines.push(p.fine);
            }
        }
        by_coarse.values_mut().for_each(|v| v.sort_unstable());
        EvalPool {
            points,
            by_fine,
            by_coarse,
        }
    }

    pub fn fine_classes(&self) -> Vec<usize> {
        self.by_fine.keys().copied().collect()
    }

    pub fn n_fine(&self) -> usize {
        self.by_fine.len()
    }
}

/// Pool indices of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Draws support and query sets; they never share a sample.
pub fn sample_episode<R: Rng + ?Sized>(pool: &EvalPool, spec: &EpisodeSpec, rng: &mut R) -> Result<Episode> {
    let all = pool.fine_classes();
    let mut classes = match spec.mode {
        EpisodeMode::Standard => {
            if spec.n_way > all.len() {
                return Err(Error::Contract(format!(
                    "{}-way episode but only {} fine classes",
                    spec.n_way,
                    all.len()
                )));
            }
            all.sample(rng, spec.n_way).copied().collect::<Vec<_>>()
        }
        EpisodeMode::AllWay => all,
        EpisodeMode::IntraClass => {
            let coarse: Vec<&Vec<usize>> = pool.by_coarse.values().collect();
            let picked = coarse
                .choose(rng)
                .ok_or_else(|| Error::Contract("empty evaluation pool".into()))?;
            (*picked).clone()
        }
    };
    if classes.is_empty() {
        return Err(Error::Contract("episode with no classes".into()));
    }
    classes.sort_unstable();

    let need = spec.k_shot + spec.n_query;
    let mut support = Vec::with_capacity(classes.len() * spec.k_shot);
    let mut query = Vec::with_capacity(classes.len() * spec.n_query);
    for &c in &classes {
        let members = &pool.by_fine[&c];
        if members.len() < need {
            return Err(Error::EpisodeInfeasible {
                class: c,
                available: members.len(),
                required: need,
            });
        }
        let mut drawn: Vec<usize> = members.sample(rng, need).copied().collect();
        drawn.shuffle(rng);
        support.extend_from_slice(&drawn[..spec.k_shot]);
        query.extend_from_slice(&drawn[spec.k_shot..]);
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}

/// Majority vote among the `k_nn` nearest supports; ties go to the smallest label.
pub fn knn_classify(
    support: &[(&[f64], usize)],
    queries: &[&[f64]],
    metric: Metric,
    k_nn: usize,
) -> Result<Vec<usize>> {
    if support.is_empty() {
        return Err(Error::Contract("empty support set".into()));
    }
    if k_nn == 0 || k_nn > support.len() {
        return Err(Error::Contract(format!(
            "k_nn = {k_nn} with {} support samples",
            support.len()
        )));
    }
    Ok(queries
        .iter()
        .map(|q| {
            let mut dists: Vec<(f64, usize)> = support
                .iter()
                .enumerate()
                .map(|(i, (s, _))| (metric.distance(q, s), i))
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for &(_, i) in &dists[..k_nn] {
                *votes.entry(support[i].1).or_default() += 1;
            }
            let best = votes.values().copied().max().unwrap_or(0);
            votes
                .into_iter()
                .find(|&(_, v)| v == best)
                .map(|(label, _)| label)
                .expect("non-empty votes")
        })
        .collect())
}

/// Per-episode accuracies reduced to mean and 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub metric: String,
    /// Recall@k in percent, keyed by k.
    pub recall: BTreeMap<String, f64>,
    /// Mean average precision in percent.
    pub map: Option<f64>,
    #[serde(skip)]
    pub std: f64,
    #[serde(skip)]
    pub accuracies: Vec<f64>,
}

/// Mean, sample standard deviation and `1.96·std/√n` of episode accuracies (percent).
pub fn aggregate(accuracies: &[f64]) -> Result<EvalReport> {
    let n = accuracies.len();
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 episodes, got {n}")));
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    Ok(EvalReport {
        mode: String::new(),
        n_way: 0,
        k_shot: 0,
        n_episodes: n,
        mean_acc: mean,
        ci95: 1.96 * std / (n as f64).sqrt(),
        metric: String::new(),
        recall: BTreeMap::new(),
        map: None,
        std,
        accuracies: accuracies.to_vec(),
    })
}

/// Runs `spec.n_episodes` episodes. Episode `e` draws from ChaCha stream `e`
/// of `seed`, so the report does not depend on how many threads run it.
pub fn run_episodes(pool: &EvalPool, spec: &EpisodeSpec, metric: Metric, k_nn: usize, seed: u64) -> Result<EvalReport> {
    let accuracies = (0..spec.n_episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(e as u64);
            let ep = sample_episode(pool, spec, &mut rng)?;
            let support: Vec<(&[f64], usize)> = ep
                .support
                .iter()
                .map(|&i| (pool.points[i].embedding.as_slice(), pool.points[i].fine))
                .collect();
            let queries: Vec<&[f64]> = ep.query.iter().map(|&i| pool.points[i].embedding.as_slice()).collect();
            let predicted = knn_classify(&support, &queries, metric, k_nn)?;
            let hits = predicted
                .iter()
                .zip(&ep.query)
                .filter(|(p, &q)| **p == pool.points[q].fine)
                .count();
            Ok(100.0 * hits as f64 / ep.query.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut report = aggregate(&accuracies)?;
    report.mode = spec.mode.as_str().into();
    report.n_way = match spec.mode {
        EpisodeMode::Standard => spec.n_way,
        EpisodeMode::AllWay => pool.n_fine(),
        // Coarse classes may differ in size; report the largest.
        EpisodeMode::IntraClass => pool.by_coarse.values().map(Vec::len).max().unwrap_or(0),
    };
    report.k_shot = spec.k_shot;
    report.metric = metric.name().into();
    Ok(report)
}

/// Precision averaged over the ranks of relevant items (fraction in [0, 1]).
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    /// Fraction of queries with a same-fine item in the top k.
    pub recall: BTreeMap<usize, f64>,
    /// Mean AP over queries that have at least one relevant gallery item.
    pub map: f64,
}

/// Recall@k and mAP; a query is never matched against the gallery item with
/// its own instance id.
pub fn retrieval_metrics(
    gallery: &[EvalPoint],
    queries: &[EvalPoint],
    metric: Metric,
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if gallery.is_empty() {
        return Err(Error::Contract("empty gallery".into()));
    }
    let per_query: Vec<(Vec<bool>, Option<f64>)> = queries
        .par_iter()
        .map(|q| {
            let mut ranked: Vec<(f64, usize)> = gallery
                .iter()
                .enumerate()
                .filter(|(_, g)| g.instance_id != q.instance_id)
                .map(|(i, g)| (metric.distance(&q.embedding, &g.embedding), i))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let relevance: Vec<bool> = ranked.iter().map(|&(_, i)| gallery[i].fine == q.fine).collect();
            let hits_at: Vec<bool> = ks.iter().map(|&k| relevance.iter().take(k).any(|&r| r)).collect();
            (hits_at, average_precision(&relevance))
        })
        .collect();
    let n = queries.len().max(1) as f64;
    let recall = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| (k, per_query.iter().filter(|(h, _)| h[j]).count() as f64 / n))
        .collect();
    let aps: Vec<f64> = per_query.iter().filter_map(|(_, ap)| *ap).collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    Ok(RetrievalMetrics { recall, map })
}

impl EvalReport {
    pub fn with_retrieval(mut self, r: &RetrievalMetrics) -> Self {
        self.recall = r.recall.iter().map(|(k, v)| (k.to_string(), 100.0 * v)).collect();
        self.map = Some(100.0 * r.map);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
