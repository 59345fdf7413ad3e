//! Run configuration: a line-oriented `key = value` file plus overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments win,
//! so a config file followed by command-line `key=value` pairs behaves as
//! expected. [`RunConfig::to_text`] writes every key, and parsing that text
//! gives back the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{EpisodeMode, EpisodeSpec};
use crate::geometry::Curvature;
use crate::hcm::{DEFAULT_ALPHA, DEFAULT_BETA};
use crate::network::{AdamConfig, MlpSpec, NetworkSpec, Space};
use crate::pseudo::{DEFAULT_MEMORY, DEFAULT_RESTARTS};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Feature files in the CSV or binary dataset format.
    Files { train: PathBuf, eval: PathBuf },
}

/// Which activations are used as the evaluation embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalLayer {
    Projector,
    Encoder,
}

impl EvalLayer {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalLayer::Projector => "projector",
            EvalLayer::Encoder => "encoder",
        }
    }
}

/// Distance for evaluation; `Auto` picks Poincaré for hyperbolic models and
/// cosine for Euclidean ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricChoice {
    Auto,
    Poincare,
    Cosine,
}

impl MetricChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricChoice::Auto => "auto",
            MetricChoice::Poincare => "poincare",
            MetricChoice::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub curvature: f64,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epoch counts after which the learning rate drops tenfold. `None`
    /// scales the default 60%/80% schedule to `epochs`.
    pub lr_decay: Option<Vec<usize>>,
    /// Epoch counts after which `d1`, `d2` are reset. Same scaling rule.
    pub reinit: Option<Vec<usize>>,
    pub memory: usize,
    /// `None` means twice the fine classes per coarse class of a synthetic
    /// source, or 8 for file sources.
    pub k_clusters: Option<usize>,
    /// Optimizer steps between reclusterings; 0 reclusters at each epoch start.
    pub recluster_every: usize,
    pub restarts: usize,
    /// Augmentation noise. `None` uses the synthetic `spread_instance`.
    pub aug_sigma: Option<f64>,
    pub encoder: Vec<usize>,
    pub projector: Vec<usize>,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub space: Space,
    pub hcm: bool,
    pub ahcd: bool,
    pub seed: u64,
    pub episode: EpisodeSpec,
    pub k_nn: usize,
    pub metric: MetricChoice,
    pub eval_layer: EvalLayer,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSource::Synthetic(SyntheticSpec::default()),
            curvature: Curvature::DEFAULT.value(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            batch_size: 64,
            epochs: 60,
            lr: 1e-3,
            lr_decay: None,
            reinit: None,
            memory: DEFAULT_MEMORY,
            k_clusters: None,
            recluster_every: 0,
            restarts: DEFAULT_RESTARTS,
            aug_sigma: None,
            encoder: vec![128, 128],
            projector: vec![128, 32],
            weight_decay: 0.0,
            clip_norm: 0.0,
            space: Space::Hyperbolic,
            hcm: true,
            ahcd: true,
            seed: 0,
            episode: EpisodeSpec::default(),
            k_nn: 1,
            metric: MetricChoice::Auto,
            eval_layer: EvalLayer::Projector,
        }
    }
}

fn scaled_schedule(epochs: usize) -> Vec<usize> {
    // 120/200 and 160/200 of the run.
    vec![(epochs * 3) / 5, (epochs * 4) / 5]
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got '{v}'"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    fn synthetic_mut(&mut self, key: &str) -> &mut SyntheticSpec {
        if !matches!(self.data, DataSource::Synthetic(_)) {
            self.data = DataSource::Synthetic(SyntheticSpec::default());
        }
        match &mut self.data {
            DataSource::Synthetic(s) => s,
            DataSource::Files { .. } => unreachable!("{key} just switched the source to synthetic"),
        }
    }

    fn files_mut(&mut self) -> (&mut PathBuf, &mut PathBuf) {
        if !matches!(self.data, DataSource::Files { .. }) {
            self.data = DataSource::Files {
                train: PathBuf::new(),
                eval: PathBuf::new(),
            };
        }
        match &mut self.data {
            DataSource::Files { train, eval } => (train, eval),
            DataSource::Synthetic(_) => unreachable!(),
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data" => match v {
                "synthetic" => {
                    self.synthetic_mut(key);
                }
                "files" => {
                    self.files_mut();
                }
                _ => return Err(Error::Config(format!("data: expected synthetic or files, got '{v}'"))),
            },
            "train_file" => *self.files_mut().0 = PathBuf::from(v),
            "eval_file" => *self.files_mut().1 = PathBuf::from(v),
            "n_coarse" => self.synthetic_mut(key).n_coarse = parse_num(key, v)?,
            "fines_per_coarse" => self.synthetic_mut(key).fines_per_coarse = parse_num(key, v)?,
            "instances_per_fine" => self.synthetic_mut(key).instances_per_fine = parse_num(key, v)?,
            "eval_instances_per_fine" => self.synthetic_mut(key).eval_instances_per_fine = parse_num(key, v)?,
            "dim" => self.synthetic_mut(key).dim = parse_num(key, v)?,
            "spread_coarse" => self.synthetic_mut(key).spread_coarse = parse_num(key, v)?,
            "spread_fine" => self.synthetic_mut(key).spread_fine = parse_num(key, v)?,
            "spread_instance" => self.synthetic_mut(key).spread_instance = parse_num(key, v)?,
            "data_seed" => self.synthetic_mut(key).seed = parse_num(key, v)?,
            "c" | "curvature" => self.curvature = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_decay" => self.lr_decay = if v == "auto" { None } else { Some(parse_list(key, v)?) },
            "reinit" => self.reinit = if v == "auto" { None } else { Some(parse_list(key, v)?) },
            "memory" => self.memory = parse_num(key, v)?,
            "k_clusters" => self.k_clusters = if v == "auto" { None } else { Some(parse_num(key, v)?) },
            "recluster_every" => self.recluster_every = parse_num(key, v)?,
            "restarts" => self.restarts = parse_num(key, v)?,
            "aug_sigma" => self.aug_sigma = if v == "auto" { None } else { Some(parse_num(key, v)?) },
            "encoder" => self.encoder = parse_list(key, v)?,
            "projector" => self.projector = parse_list(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "space" => self.space = v.parse()?,
            "hcm" => self.hcm = parse_bool(key, v)?,
            "ahcd" => self.ahcd = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "n_way" => self.episode.n_way = parse_num(key, v)?,
            "k_shot" => self.episode.k_shot = parse_num(key, v)?,
            "n_query" => self.episode.n_query = parse_num(key, v)?,
            "episodes" => self.episode.n_episodes = parse_num(key, v)?,
            "mode" => self.episode.mode = v.parse::<EpisodeMode>()?,
            "k_nn" => self.k_nn = parse_num(key, v)?,
            "metric" => {
                self.metric = match v {
                    "auto" => MetricChoice::Auto,
                    "poincare" => MetricChoice::Poincare,
                    "cosine" => MetricChoice::Cosine,
                    _ => return Err(Error::Config(format!("metric: unknown '{v}'"))),
                }
            }
            "eval_layer" => {
                self.eval_layer = match v {
                    "projector" => EvalLayer::Projector,
                    "encoder" => EvalLayer::Encoder,
                    _ => return Err(Error::Config(format!("eval_layer: unknown '{v}'"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn lr_decay_epochs(&self) -> Vec<usize> {
        self.lr_decay.clone().unwrap_or_else(|| scaled_schedule(self.epochs))
    }

    pub fn reinit_epochs(&self) -> Vec<usize> {
        self.reinit.clone().unwrap_or_else(|| scaled_schedule(self.epochs))
    }

    pub fn resolved_k_clusters(&self) -> usize {
        self.k_clusters.unwrap_or(match &self.data {
            DataSource::Synthetic(s) => 2 * s.fines_per_coarse,
            DataSource::Files { .. } => 8,
        })
    }

    pub fn resolved_aug_sigma(&self) -> f64 {
        self.aug_sigma.unwrap_or(match &self.data {
            DataSource::Synthetic(s) => s.spread_instance,
            DataSource::Files { .. } => 0.05,
        })
    }

    /// Learning rate for the 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs().iter().filter(|&&d| epoch >= d).count();
        self.lr * 0.1f64.powi(drops as i32)
    }

    pub fn network_spec(&self, input_dim: usize) -> Result<NetworkSpec> {
        let mut enc = vec![input_dim];
        enc.extend_from_slice(&self.encoder);
        let Some(&enc_out) = enc.last() else { unreachable!() };
        let mut proj = vec![enc_out];
        proj.extend_from_slice(&self.projector);
        NetworkSpec::new(MlpSpec::new(enc)?, MlpSpec::new(proj)?)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        Curvature::new(self.curvature).map_err(|e| Error::Config(e.to_string()))?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        if let DataSource::Files { train, eval } = &self.data {
            if train.as_os_str().is_empty() || eval.as_os_str().is_empty() {
                return bad("file data source needs train_file and eval_file".into());
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be a finite nonnegative number, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if self.memory == 0 || self.restarts == 0 || self.resolved_k_clusters() == 0 {
            return bad("memory, restarts and k_clusters must be at least 1".into());
        }
        if self.k_nn == 0 {
            return bad("k_nn must be at least 1".into());
        }
        if self.ahcd && !self.hcm {
            return bad("ahcd adapts the margin targets and needs hcm = on".into());
        }
        if self.projector.is_empty() || self.encoder.is_empty() {
            return bad("encoder and projector need at least one layer each".into());
        }
        if !(self.resolved_aug_sigma() >= 0.0) {
            return bad("aug_sigma must be nonnegative".into());
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return bad("weight_decay and clip_norm must be nonnegative".into());
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.data {
            DataSource::Synthetic(d) => {
                kv("data", "synthetic".into());
                kv("n_coarse", d.n_coarse.to_string());
                kv("fines_per_coarse", d.fines_per_coarse.to_string());
                kv("instances_per_fine", d.instances_per_fine.to_string());
                kv("eval_instances_per_fine", d.eval_instances_per_fine.to_string());
                kv("dim", d.dim.to_string());
                kv("spread_coarse", d.spread_coarse.to_string());
                kv("spread_fine", d.spread_fine.to_string());
                kv("spread_instance", d.spread_instance.to_string());
                kv("data_seed", d.seed.to_string());
            }
            DataSource::Files { train, eval } => {
                kv("data", "files".into());
                kv("train_file", train.display().to_string());
                kv("eval_file", eval.display().to_string());
            }
        }
        kv("space", self.space.as_str().into());
        kv("hcm", on_off(self.hcm).into());
        kv("ahcd", on_off(self.ahcd).into());
        kv("c", self.curvature.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay", join(&self.lr_decay_epochs()));
        kv("reinit", join(&self.reinit_epochs()));
        kv("memory", self.memory.to_string());
        kv("k_clusters", self.resolved_k_clusters().to_string());
        kv("recluster_every", self.recluster_every.to_string());
        kv("restarts", self.restarts.to_string());
        kv("aug_sigma", self.resolved_aug_sigma().to_string());
        kv("encoder", join(&self.encoder));
        kv("projector", join(&self.projector));
        kv("weight_decay", self.weight_decay.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("seed", self.seed.to_string());
        kv("mode", self.episode.mode.as_str().into());
        kv("n_way", self.episode.n_way.to_string());
        kv("k_shot", self.episode.k_shot.to_string());
        kv("n_query", self.episode.n_query.to_string());
        kv("episodes", self.episode.n_episodes.to_string());
        kv("k_nn", self.k_nn.to_string());
        kv("metric", self.metric.as_str().into());
        kv("eval_layer", self.eval_layer.as_str().into());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_desk_schedule() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_decay_epochs(), vec![36, 48]);
        assert_eq!(cfg.reinit_epochs(), vec![36, 48]);
        assert_eq!(cfg.resolved_k_clusters(), 8);
        assert_eq!(cfg.resolved_aug_sigma(), 0.05);
        assert_eq!(cfg.curvature, 0.001);
        assert_eq!(cfg.alpha, 800.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn schedule_scales_with_epochs() {
        let cfg = RunConfig::parse("epochs = 200").unwrap();
        assert_eq!(cfg.lr_decay_epochs(), vec![120, 160]);
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(120) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(199) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn last_writer_wins() {
        let mut cfg = RunConfig::parse("alpha = 5\n# comment\n\nalpha = 7\nspace = euclidean").unwrap();
        assert_eq!(cfg.alpha, 7.0);
        cfg.apply_override("alpha=9").unwrap();
        assert_eq!(cfg.alpha, 9.0);
        assert_eq!(cfg.space, Space::Euclidean);
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::parse("hcm = off\nahcd = off\nmode = all_way\nk_nn = 3").unwrap();
        cfg.aug_sigma = Some(0.125);
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert!(!back.hcm);
        assert_eq!(back.episode.mode, EpisodeMode::AllWay);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match RunConfig::parse("alpha = 1\nbogus line") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse("alpha = x"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("nope = 1"), Err(Error::Parse { .. })));
    }

    #[test]
    fn validation_rejects_inconsistent_flags() {
        let cfg = RunConfig::parse("hcm = off").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(RunConfig::parse("beta = 1").unwrap().validate().is_err());
        assert!(RunConfig::parse("c = 0").unwrap().validate().is_err());
        assert!(RunConfig::parse("spread_fine = 2").unwrap().validate().is_err());
    }
}
