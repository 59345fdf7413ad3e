//! Synthetic hierarchical data, two-view augmentation, dataset files and batching.
//!
//! Dataset files come in two flavours that carry the same content:
//!
//! * CSV. First line `dim=<n>,has_fine=<0|1>`, then one row per sample:
//!   `coarse,fine,f_1,...,f_n` (the `fine` column only when `has_fine=1`).
//! * Binary. Magic `PEHCM1-DATA`, little-endian `u32` version, `u32` dim,
//!   `u8` has_fine, `u64` count, then per row `u32` coarse, optional `u32` fine,
//!   and `dim` `f64` values.
//!
//! Instance ids are the row index in the file.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hcm::LabelTriple;
use crate::io::write_atomic;

pub const BINARY_MAGIC: &[u8; 11] = b"PEHCM1-DATA";
pub const BINARY_VERSION: u32 = 1;

/// Three-level Gaussian hierarchy: coarse prototypes, fine prototypes around
/// them, instances around those.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_coarse: usize,
    pub fines_per_coarse: usize,
    pub instances_per_fine: usize,
    /// Held-out instances per fine class for evaluation.
    pub eval_instances_per_fine: usize,
    pub dim: usize,
    pub spread_coarse: f64,
    pub spread_fine: f64,
    pub spread_instance: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_coarse: 5,
            fines_per_coarse: 4,
            instances_per_fine: 200,
            eval_instances_per_fine: 40,
            dim: 32,
            spread_coarse: 1.0,
            spread_fine: 0.25,
            spread_instance: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse == 0 || self.fines_per_coarse == 0 || self.instances_per_fine == 0 || self.dim == 0 {
            return Err(Error::Config("synthetic counts and dim must be at least 1".into()));
        }
        let ordered = self.spread_coarse > self.spread_fine
            && self.spread_fine > self.spread_instance
            && self.spread_instance >= 0.0;
        if !ordered {
            return Err(Error::Config(format!(
                "spreads must satisfy coarse > fine > instance >= 0, got {} / {} / {}",
                self.spread_coarse, self.spread_fine, self.spread_instance
            )));
        }
        Ok(())
    }

    pub fn n_fine(&self) -> usize {
        self.n_coarse * self.fines_per_coarse
    }
}

/// One labelled feature vector. The fine label is only ever read by the
/// generator and by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub coarse: usize,
    fine_true: Option<usize>,
    pub instance_id: u64,
}

impl Sample {
    pub fn new(features: Vec<f64>, coarse: usize, fine_true: Option<usize>, instance_id: u64) -> Self {
        Sample {
            features,
            coarse,
            fine_true,
            instance_id,
        }
    }

    /// Hidden fine label, for evaluation only.
    pub fn fine_label(&self) -> Option<usize> {
        self.fine_true
    }
}

/// Training and evaluation pools with disjoint instance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub n_coarse: usize,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    /// Assembles a dataset from two files, shifting eval ids past the train ids.
    pub fn from_files(train: &Path, eval: &Path) -> Result<Self> {
        let (dim, train) = ingest_features(train)?;
        let (eval_dim, mut eval) = ingest_features(eval)?;
        if dim != eval_dim {
            return Err(Error::Contract(format!(
                "train dim {dim} differs from eval dim {eval_dim}"
            )));
        }
        let offset = train.len() as u64;
        eval.iter_mut().for_each(|s| s.instance_id += offset);
        let n_coarse = train.iter().chain(&eval).map(|s| s.coarse + 1).max().unwrap_or(0);
        Ok(Dataset {
            dim,
            n_coarse,
            train,
            eval,
        })
    }
}

/// Draws the hierarchy. Train ids are `0..n_train`, eval ids follow.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let gauss = |scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..spec.dim).map(|_| scale * std.sample(rng)).collect()
    };

    let coarse_protos: Vec<Vec<f64>> = (0..spec.n_coarse).map(|_| gauss(spec.spread_coarse, &mut rng)).collect();
    let fine_protos: Vec<Vec<f64>> = coarse_protos
        .iter()
        .flat_map(|c| {
            (0..spec.fines_per_coarse)
                .map(|_| add(c, &gauss(spec.spread_fine, &mut rng)))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut next_id = 0u64;
    let mut draw = |per_fine: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_fine * fine_protos.len());
        for (f, proto) in fine_protos.iter().enumerate() {
            for _ in 0..per_fine {
                let features = add(proto, &gauss(spec.spread_instance, rng));
                out.push(Sample::new(features, f / spec.fines_per_coarse, Some(f), next_id));
                next_id += 1;
            }
        }
        out
    };
    let train = draw(spec.instances_per_fine, &mut rng);
    let eval = draw(spec.eval_instances_per_fine, &mut rng);
    Ok(Dataset {
        dim: spec.dim,
        n_coarse: spec.n_coarse,
        train,
        eval,
    })
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Vector-space stand-in for image augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Standard deviation of the additive Gaussian noise.
    pub sigma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl AugmentConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        AugmentConfig {
            sigma,
            scale_min: 0.8,
            scale_max: 1.2,
        }
    }
}

/// The two augmented views of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_q: Vec<f64>,
    pub view_k: Vec<f64>,
    pub labels: LabelTriple,
}

fn augment_view<R: Rng + ?Sized>(features: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, cfg.sigma.max(0.0)).expect("valid sigma");
    let noisy: Vec<f64> = features
        .iter()
        .map(|v| if cfg.sigma > 0.0 { v + normal.sample(rng) } else { *v })
        .collect();
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.random_range(cfg.scale_min..cfg.scale_max)
    } else {
        cfg.scale_min
    };
    noisy.into_iter().map(|v| v * scale).collect()
}

/// Two independently perturbed copies of `sample` sharing its instance id.
pub fn augment_pair<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<ViewPair> {
    if !(cfg.sigma >= 0.0) || !(cfg.scale_min > 0.0) || cfg.scale_max < cfg.scale_min {
        return Err(Error::InvalidInput(format!("bad augmentation settings {cfg:?}")));
    }
    Ok(ViewPair {
        view_q: augment_view(&sample.features, cfg, rng),
        view_k: augment_view(&sample.features, cfg, rng),
        labels: LabelTriple {
            instance_id: sample.instance_id,
            fine_pseudo: None,
            coarse: sample.coarse,
        },
    })
}

/// Shuffled index batches of exactly `batch_size`; the remainder is dropped.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks_exact(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

fn has_fine(samples: &[Sample]) -> Result<bool> {
    let with = samples.iter().filter(|s| s.fine_true.is_some()).count();
    if with != 0 && with != samples.len() {
        return Err(Error::Contract("fine labels must be present on all samples or none".into()));
    }
    Ok(with > 0 && with == samples.len())
}

fn check_dims(samples: &[Sample], dim: usize) -> Result<()> {
    match samples.iter().position(|s| s.features.len() != dim) {
        Some(i) => Err(Error::Contract(format!(
            "sample {i} has {} features, expected {dim}",
            samples[i].features.len()
        ))),
        None => Ok(()),
    }
}

pub fn write_csv(path: &Path, samples: &[Sample], dim: usize) -> Result<()> {
    check_dims(samples, dim)?;
    let fine = has_fine(samples)?;
    let mut out = format!("dim={dim},has_fine={}\n", u8::from(fine));
    for s in samples {
        write!(out, "{}", s.coarse).expect("string write");
        if let Some(f) = s.fine_true.filter(|_| fine) {
            write!(out, ",{f}").expect("string write");
        }
        for v in &s.features {
            // Display for f64 is shortest round-trip.
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_binary(path: &Path, samples: &[Sample], dim: usize) -> Result<()> {
    check_dims(samples, dim)?;
    let fine = has_fine(samples)?;
    let mut out = Vec::with_capacity(32 + samples.len() * (8 + 8 * dim));
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.push(u8::from(fine));
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&(s.coarse as u32).to_le_bytes());
        if fine {
            out.extend_from_slice(&(s.fine_true.unwrap_or(0) as u32).to_le_bytes());
        }
        s.features.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    write_atomic(path, &out)
}

/// Reads a CSV or binary dataset file (format detected from the first bytes).
/// Returns the feature dimension and the samples.
pub fn ingest_features(path: &Path) -> Result<(usize, Vec<Sample>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
            line: 1,
            message: "file is neither UTF-8 CSV nor PEHCM1-DATA".into(),
        })?;
        parse_csv(&text)
    }
}

pub fn parse_csv(text: &str) -> Result<(usize, Vec<Sample>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let header_err = |m: &str| Error::Parse {
        line: 1,
        message: format!("{m}; expected 'dim=<n>,has_fine=<0|1>'"),
    };
    let mut parts = header.trim().split(',');
    let dim: usize = parts
        .next()
        .and_then(|p| p.strip_prefix("dim="))
        .and_then(|v| v.parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| header_err("bad dim field"))?;
    let fine = match parts.next().and_then(|p| p.strip_prefix("has_fine=")) {
        Some("0") => false,
        Some("1") => true,
        _ => return Err(header_err("bad has_fine field")),
    };
    if parts.next().is_some() {
        return Err(header_err("extra header fields"));
    }

    let expected_cols = dim + 1 + usize::from(fine);
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != expected_cols {
            return Err(Error::Parse {
                line: line_no,
                message: format!("row has {} columns, expected {expected_cols}", cols.len()),
            });
        }
        let label = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad {what} label '{s}'"),
            })
        };
        let coarse = label(cols[0], "coarse")?;
        let fine_label = if fine { Some(label(cols[1], "fine")?) } else { None };
        let features = cols[1 + usize::from(fine)..]
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        message: format!("bad feature value '{s}'"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let id = samples.len() as u64;
        samples.push(Sample::new(features, coarse, fine_label, id));
    }
    Ok((dim, samples))
}

fn parse_binary(bytes: &[u8]) -> Result<(usize, Vec<Sample>)> {
    let mut pos = BINARY_MAGIC.len();
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        if end > bytes.len() {
            return Err(Error::Parse {
                line: 0,
                message: format!("binary dataset truncated at byte {pos}"),
            });
        }
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != BINARY_VERSION {
        return Err(Error::Parse {
            line: 0,
            message: format!("unsupported binary dataset version {version}"),
        });
    }
    let dim = u32_at(take(4)?) as usize;
    let fine = take(1)?[0] == 1;
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for id in 0..count {
        let coarse = u32_at(take(4)?) as usize;
        let fine_label = if fine { Some(u32_at(take(4)?) as usize) } else { None };
        let features = (0..dim)
            .map(|_| take(8).map(|s| f64::from_le_bytes(s.try_into().expect("8 bytes"))))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample::new(features, coarse, fine_label, id as u64));
    }
    if pos != bytes.len() {
        return Err(Error::Parse {
            line: 0,
            message: "trailing bytes after binary dataset".into(),
        });
    }
    Ok((dim, samples))
}
