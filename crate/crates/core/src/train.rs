//! Training orchestration, evaluation of checkpoints, and cluster inspection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DataSource, EvalLayer, MetricChoice, RunConfig};
use crate::data::{augment_pair, epoch_batches, generate, AugmentConfig, Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{retrieval_metrics, run_episodes, EvalPoint, EvalPool, EvalReport, Metric};
use crate::geometry::{exp_map_into, Curvature};
use crate::hcm::{batch_stratum_means, TargetDistances};
use crate::io::write_atomic;
use crate::network::checkpoint::Checkpoint;
use crate::network::objective::{compute_loss, LossConfig, PairForward};
use crate::network::{Adam, Head, Model, Space};
use crate::pseudo::{assign_pseudo, recluster, ClusterModel, MemoryBank};

/// Column layout of `metrics.csv`; bump the version when it changes.
pub const METRICS_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "epoch,l_cls,l_hcm,total,d1,d2,train_coarse_acc";

/// Recall cut-offs reported by [`evaluate`].
pub const RECALL_KS: [usize; 4] = [1, 2, 4, 8];

// Independent random streams of one run.
const STREAM_INIT: u64 = 0;
const STREAM_BATCHES: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_REPAIR: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn mix(seed: u64, n: u64) -> u64 {
    seed ^ (n.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Epoch averages. Wall time is kept separately so this file is reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_hcm: f64,
    pub total: f64,
    pub d1: f64,
    pub d2: f64,
    pub train_coarse_acc: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("# pehcm metrics v{METRICS_VERSION}\n{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.l_cls, r.l_hcm, r.total, r.d1, r.d2, r.train_coarse_acc
        );
    }
    s
}

/// Reads back a metrics file written by [`metrics_csv`].
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != METRICS_HEADER {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("expected header '{METRICS_HEADER}'"),
                });
            }
            seen_header = true;
            continue;
        }
        let err = |message: String| Error::Parse { line: n + 1, message };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(err(format!("expected 7 columns, got {}", cols.len())));
        }
        let f = |i: usize| cols[i].parse::<f64>().map_err(|_| err(format!("bad number '{}'", cols[i])));
        rows.push(MetricsRow {
            epoch: cols[0].parse().map_err(|_| err(format!("bad epoch '{}'", cols[0])))?,
            l_cls: f(1)?,
            l_hcm: f(2)?,
            total: f(3)?,
            d1: f(4)?,
            d2: f(5)?,
            train_coarse_acc: f(6)?,
        });
    }
    Ok(rows)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(spec) => generate(spec),
        DataSource::Files { train, eval } => Dataset::from_files(train, eval),
    }
}

/// A freshly initialized model, optimizer and ladder for `cfg`.
pub fn initial_checkpoint(cfg: &RunConfig, dataset: &Dataset) -> Result<Checkpoint> {
    cfg.validate()?;
    let spec = cfg.network_spec(dataset.dim)?;
    let c = Curvature::new(cfg.curvature)?;
    let model = Model::init(spec, dataset.n_coarse, cfg.space, c, &mut stream(cfg.seed, STREAM_INIT));
    let adam = Adam::new(&model, cfg.adam());
    Ok(Checkpoint {
        model,
        adam,
        targets: TargetDistances::new(cfg.beta),
        seed: cfg.seed,
        epoch: 0,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    /// Seconds per epoch.
    pub wall_time: Vec<f64>,
    pub clusters: ClusterModel,
}

fn rows_of(a: &Array2<f64>) -> Vec<&[f64]> {
    let n = a.ncols();
    a.as_slice().expect("standard layout").chunks(n.max(1)).collect()
}

/// Runs the full training loop in memory.
pub fn train(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let mut ck = initial_checkpoint(cfg, dataset)?;
    let n = dataset.train.len();
    if cfg.epochs > 0 && n < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {n} training samples",
            cfg.batch_size
        )));
    }
    let k_clusters = cfg.resolved_k_clusters();
    let reinit = cfg.reinit_epochs();
    let augment = AugmentConfig::with_sigma(cfg.resolved_aug_sigma());
    let loss_cfg = LossConfig {
        alpha: cfg.alpha,
        hcm: cfg.hcm,
        fault: None,
    };
    let mut batch_rng = stream(cfg.seed, STREAM_BATCHES);
    let mut aug_rng = stream(cfg.seed, STREAM_AUGMENT);
    let mut repair_rng = stream(cfg.seed, STREAM_REPAIR);
    let mut bank = MemoryBank::new(dataset.n_coarse, cfg.memory);
    let mut clusters = ClusterModel::empty(dataset.n_coarse, k_clusters);
    let mut n_reclusters = 0u64;
    let mut step = 0usize;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut wall_time = Vec::with_capacity(cfg.epochs);
    let dim = dataset.dim;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        if cfg.ahcd {
            ck.targets.begin_epoch(epoch, &reinit);
        }
        if cfg.hcm && cfg.recluster_every == 0 {
            clusters = recluster(&bank, k_clusters, cfg.restarts, mix(cfg.seed, n_reclusters));
            n_reclusters += 1;
        }
        let (mut s_cls, mut s_hcm, mut s_total, mut correct, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let batches = epoch_batches(n, cfg.batch_size, &mut batch_rng);
        for batch in &batches {
            if cfg.hcm && cfg.recluster_every > 0 && step.is_multiple_of(cfg.recluster_every) {
                clusters = recluster(&bank, k_clusters, cfg.restarts, mix(cfg.seed, n_reclusters));
                n_reclusters += 1;
            }
            let b = batch.len();
            let mut xq = Array2::zeros((b, dim));
            let mut xk = Array2::zeros((b, dim));
            let mut labels = Vec::with_capacity(b);
            for (r, &i) in batch.iter().enumerate() {
                let pair = augment_pair(&dataset.train[i], &augment, &mut aug_rng)?;
                xq.row_mut(r).assign(&ndarray::ArrayView1::from(&pair.view_q));
                xk.row_mut(r).assign(&ndarray::ArrayView1::from(&pair.view_k));
                labels.push(pair.labels);
            }
            let coarse: Vec<usize> = labels.iter().map(|l| l.coarse).collect();
            let fwd = PairForward::new(&ck.model, &xq, &xk)?;
            if cfg.hcm {
                let pseudo = assign_pseudo(rows_of(fwd.k_features()), &coarse, &clusters)?;
                labels.iter_mut().zip(pseudo).for_each(|(l, p)| l.fine_pseudo = p);
            }
            let (out, grads) = compute_loss(&ck.model, &fwd, &labels, &ck.targets, &loss_cfg, true)?;
            let grads = grads.expect("gradients requested");
            if !grads.is_finite() {
                return Err(Error::NonFinite { term: "gradients".into() });
            }
            ck.adam.step(&mut ck.model, &grads, lr)?;
            if let Head::Hyperbolic(p) = &mut ck.model.head {
                p.repair_normals(&mut repair_rng);
            }
            if cfg.hcm {
                bank.push(rows_of(fwd.k_features()), &coarse)?;
            }
            if cfg.ahcd {
                let w = out.distances.as_ref().expect("margin term ran");
                ck.targets.momentum_update(batch_stratum_means(w, &labels, &labels));
            }
            s_cls += out.l_cls;
            s_hcm += out.l_hcm;
            s_total += out.total;
            correct += out.correct;
            seen += b;
            step += 1;
        }
        let nb = batches.len().max(1) as f64;
        metrics.push(MetricsRow {
            epoch: epoch + 1,
            l_cls: s_cls / nb,
            l_hcm: s_hcm / nb,
            total: s_total / nb,
            d1: ck.targets.d1,
            d2: ck.targets.d2,
            train_coarse_acc: correct as f64 / seen.max(1) as f64,
        });
        wall_time.push(started.elapsed().as_secs_f64());
        ck.epoch = epoch as u64 + 1;
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        metrics,
        wall_time,
        clusters,
    })
}

/// Trains and writes `config.resolved`, `metrics.csv`, `timing.csv` and
/// `checkpoint.bin` into `out_dir`.
pub fn train_to_dir(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    write_atomic(&out_dir.join("config.resolved"), cfg.to_text().as_bytes())?;
    let dataset = load_dataset(cfg)?;
    let outcome = train(cfg, &dataset)?;
    write_atomic(&out_dir.join("metrics.csv"), metrics_csv(&outcome.metrics).as_bytes())?;
    let mut timing = String::from("epoch,wall_seconds\n");
    for (e, t) in outcome.wall_time.iter().enumerate() {
        let _ = writeln!(timing, "{},{t:.6}", e + 1);
    }
    write_atomic(&out_dir.join("timing.csv"), timing.as_bytes())?;
    outcome.checkpoint.save(&out_dir.join("checkpoint.bin"))?;
    Ok(outcome)
}

/// The metric a choice resolves to for `model`.
pub fn resolve_metric(choice: MetricChoice, model: &Model, fallback_c: f64) -> Result<Metric> {
    let c = match model.curvature() {
        Some(c) => c,
        None => Curvature::new(fallback_c)?,
    };
    Ok(match (choice, model.space()) {
        (MetricChoice::Cosine, _) | (MetricChoice::Auto, Space::Euclidean) => Metric::Cosine,
        (MetricChoice::Poincare, _) | (MetricChoice::Auto, Space::Hyperbolic) => Metric::Poincare(c),
    })
}

/// Embeds labelled samples. Poincaré metrics get exp-mapped embeddings.
pub fn embed_pool(model: &Model, samples: &[Sample], layer: EvalLayer, metric: Metric) -> Result<EvalPool> {
    if samples.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let dim = samples[0].features.len();
    let mut x = Array2::zeros((samples.len(), dim));
    for (r, s) in samples.iter().enumerate() {
        if s.features.len() != dim {
            return Err(Error::Contract(format!("sample {r} has {} features, expected {dim}", s.features.len())));
        }
        x.row_mut(r).assign(&ndarray::ArrayView1::from(&s.features));
    }
    let (enc, proj) = model.embed(&x)?;
    let feats = match layer {
        EvalLayer::Projector => proj,
        EvalLayer::Encoder => enc,
    };
    let points = samples
        .iter()
        .zip(rows_of(&feats))
        .map(|(s, f)| {
            let fine = s
                .fine_label()
                .ok_or_else(|| Error::Contract("evaluation needs fine labels on every sample".into()))?;
            let embedding = match metric {
                Metric::Poincare(c) => {
                    let mut z = vec![0.0; f.len()];
                    exp_map_into(f, c, &mut z);
                    z
                }
                Metric::Cosine => f.to_vec(),
            };
            Ok(EvalPoint {
                embedding,
                fine,
                coarse: s.coarse,
                instance_id: s.instance_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalPool::new(points))
}

/// Few-shot episodes plus retrieval metrics on the evaluation split.
pub fn evaluate(model: &Model, dataset: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
    let metric = resolve_metric(cfg.metric, model, cfg.curvature)?;
    let pool = embed_pool(model, &dataset.eval, cfg.eval_layer, metric)?;
    let report = run_episodes(&pool, &cfg.episode, metric, cfg.k_nn, cfg.seed)?;
    let retrieval = retrieval_metrics(&pool.points, &pool.points, metric, &RECALL_KS)?;
    Ok(report.with_retrieval(&retrieval))
}

/// The four rows of the component ablation, from coarse-only Euclidean
/// training to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Euclidean,
    Hyperbolic,
    HyperbolicHcm,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Euclidean,
        Ablation::Hyperbolic,
        Ablation::HyperbolicHcm,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Euclidean => "E",
            Ablation::Hyperbolic => "H",
            Ablation::HyperbolicHcm => "H+HCM",
            Ablation::Full => "H+HCM+AHCD",
        }
    }

    /// `base` with this row's space and loss switches.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let (space, hcm, ahcd) = match self {
            Ablation::Euclidean => (Space::Euclidean, false, false),
            Ablation::Hyperbolic => (Space::Hyperbolic, false, false),
            Ablation::HyperbolicHcm => (Space::Hyperbolic, true, false),
            Ablation::Full => (Space::Hyperbolic, true, true),
        };
        RunConfig {
            space,
            hcm,
            ahcd,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassClusters {
    pub coarse: usize,
    pub samples: usize,
    /// Centroids fitted for this class; 0 when it had too few samples.
    pub centroids: usize,
    /// Samples assigned to each centroid.
    pub histogram: Vec<usize>,
    /// `contingency[fine][cluster]` counts, when fine labels exist.
    pub contingency: Option<BTreeMap<usize, Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterReport {
    pub k_clusters: usize,
    pub classes: Vec<ClassClusters>,
}

/// Clusters the projector features of the training split per coarse class,
/// using the last `memory` samples of each class, and tabulates assignments.
pub fn cluster_inspect(model: &Model, dataset: &Dataset, cfg: &RunConfig) -> Result<ClusterReport> {
    let samples = &dataset.train;
    if samples.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut x = Array2::zeros((samples.len(), dataset.dim));
    for (r, s) in samples.iter().enumerate() {
        x.row_mut(r).assign(&ndarray::ArrayView1::from(&s.features));
    }
    let (_, proj) = model.embed(&x)?;
    let feats = rows_of(&proj);
    let coarse: Vec<usize> = samples.iter().map(|s| s.coarse).collect();
    let mut bank = MemoryBank::new(dataset.n_coarse, cfg.memory);
    bank.push(feats.iter().copied(), &coarse)?;
    let k = cfg.resolved_k_clusters();
    let model_c = recluster(&bank, k, cfg.restarts, cfg.seed);
    let assigned = assign_pseudo(feats.iter().copied(), &coarse, &model_c)?;
    let classes = (0..dataset.n_coarse)
        .map(|c| {
            let centroids = model_c.centroids(c).map_or(0, <[Vec<f64>]>::len);
            let mut histogram = vec![0; centroids];
            let mut table: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            let mut has_fine = true;
            let mut count = 0;
            for (s, a) in samples.iter().zip(&assigned).filter(|(s, _)| s.coarse == c) {
                count += 1;
                if let Some(a) = *a {
                    histogram[a] += 1;
                    match s.fine_label() {
                        Some(f) => table.entry(f).or_insert_with(|| vec![0; centroids])[a] += 1,
                        None => has_fine = false,
                    }
                }
            }
            ClassClusters {
                coarse: c,
                samples: count,
                centroids,
                histogram,
                contingency: (has_fine && centroids > 0).then_some(table),
            }
        })
        .collect();
    Ok(ClusterReport { k_clusters: k, classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::parse(
            "n_coarse = 2\nfines_per_coarse = 2\ninstances_per_fine = 16\neval_instances_per_fine = 8\n\
             dim = 6\nencoder = 8\nprojector = 8,4\nbatch_size = 8\nepochs = 3\nmemory = 16\n\
             episodes = 10\nn_way = 2\nn_query = 3",
        )
        .unwrap();
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn metrics_round_trip() {
        let rows = vec![MetricsRow {
            epoch: 1,
            l_cls: 0.1 + 0.2,
            l_hcm: 1e-17,
            total: 3.5,
            d1: 0.134,
            d2: 0.5,
            train_coarse_acc: 0.75,
        }];
        assert_eq!(parse_metrics(&metrics_csv(&rows)).unwrap(), rows);
        assert!(parse_metrics("epoch,x\n").is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = RunConfig { epochs: 0, ..tiny() };
        let data = load_dataset(&cfg).unwrap();
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.checkpoint, initial_checkpoint(&cfg, &data).unwrap());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn tiny_run_logs_every_epoch() {
        let cfg = tiny();
        let data = load_dataset(&cfg).unwrap();
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.metrics.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(out.metrics.iter().all(|r| r.total.is_finite() && r.l_hcm > 0.0));
        assert_eq!(out.checkpoint.epoch, 3);
        let report = evaluate(&out.checkpoint.model, &data, &cfg).unwrap();
        assert_eq!(report.n_episodes, 10);
        assert_eq!(report.metric, "poincare");
    }

    #[test]
    fn eval_needs_fine_labels() {
        let cfg = tiny();
        let mut data = load_dataset(&cfg).unwrap();
        data.eval = data
            .eval
            .iter()
            .map(|s| Sample::new(s.features.clone(), s.coarse, None, s.instance_id))
            .collect();
        let ck = initial_checkpoint(&cfg, &data).unwrap();
        assert!(matches!(evaluate(&ck.model, &data, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_larger_than_dataset_is_rejected() {
        let mut cfg = tiny();
        cfg.data = DataSource::Synthetic(SyntheticSpec {
            instances_per_fine: 1,
            ..SyntheticSpec::default()
        });
        cfg.batch_size = 64;
        let data = load_dataset(&cfg).unwrap();
        assert!(matches!(train(&cfg, &data), Err(Error::Config(_))));
    }
}
