//! Binary checkpoint: magic `PEHCM1`, little-endian throughout.
//!
//! ```text
//! magic        6 bytes  "PEHCM1"
//! version      u32      FORMAT_VERSION
//! seed         u64
//! epoch        u64      epochs completed
//! space        u8       0 = euclidean, 1 = hyperbolic
//! curvature    f64
//! n_coarse     u32
//! encoder dims u32 count, then u32 each
//! projector    u32 count, then u32 each
//! params       per tensor: u32 rows, u32 cols, rows·cols f64 (row-major)
//! adam         f64 beta1, beta2, eps, weight_decay, clip_norm; u64 step;
//!              first moments then second moments, same layout as params
//! targets      f64 d0, d1, d2, d3, beta
//! ```

use std::path::Path;

use ndarray::Array2;

use super::{Adam, AdamConfig, Head, Linear, MlpSpec, Model, NetworkSpec};
use crate::error::{Error, Result};
use crate::geometry::Curvature;
use crate::hcm::TargetDistances;
use crate::io::write_atomic;
use crate::mlr::MlrParams;

pub const MAGIC: &[u8; 6] = b"PEHCM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Adam,
    pub targets: TargetDistances,
    pub seed: u64,
    pub epoch: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn dims(&mut self, dims: &[usize]) {
        self.u32(dims.len());
        dims.iter().for_each(|&d| self.u32(d));
    }
    fn tensor(&mut self, t: &Array2<f64>) {
        self.u32(t.nrows());
        self.u32(t.ncols());
        t.iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        if n > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        (0..n).map(|_| self.u32()).collect()
    }
    fn tensor(&mut self, expect: (usize, usize)) -> Result<Array2<f64>> {
        let shape = (self.u32()?, self.u32()?);
        if shape != expect {
            return Err(Error::Checkpoint(format!(
                "tensor shape {shape:?}, expected {expect:?}"
            )));
        }
        let data = (0..shape.0 * shape.1).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec(shape, data).expect("length matches shape"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION as usize);
        w.u64(self.seed);
        w.u64(self.epoch);
        let (space, c) = match &self.model.head {
            Head::Linear(_) => (0, 0.0),
            Head::Hyperbolic(p) => (1, p.curvature.value()),
        };
        w.u8(space);
        w.f64(c);
        w.u32(self.model.n_coarse());
        w.dims(&self.model.spec.encoder.layer_dims);
        w.dims(&self.model.spec.projector.layer_dims);
        self.model.params().into_iter().for_each(|t| w.tensor(t));
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            clip_norm,
        } = self.adam.config;
        [beta1, beta2, eps, weight_decay, clip_norm].into_iter().for_each(|v| w.f64(v));
        w.u64(self.adam.step);
        self.adam.m.iter().chain(&self.adam.v).for_each(|t| w.tensor(t));
        let t = &self.targets;
        [t.d0, t.d1, t.d2, t.d3, t.beta].into_iter().for_each(|v| w.f64(v));
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("not a PEHCM1 checkpoint (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let space = r.u8()?;
        let c = r.f64()?;
        let n_coarse = r.u32()?;
        let spec = NetworkSpec::new(MlpSpec::new(r.dims()?)?, MlpSpec::new(r.dims()?)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut dims = spec.encoder.layer_dims.clone();
        dims.extend_from_slice(&spec.projector.layer_dims[1..]);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push(Linear {
                weight: r.tensor((w[0], w[1]))?,
                bias: r.tensor((1, w[1]))?,
            });
        }
        let embed = spec.embed_dim();
        let head = match space {
            0 => Head::Linear(Linear {
                weight: r.tensor((embed, n_coarse))?,
                bias: r.tensor((1, n_coarse))?,
            }),
            1 => Head::Hyperbolic(MlrParams {
                p_raw: r.tensor((n_coarse, embed))?,
                a: r.tensor((n_coarse, embed))?,
                curvature: Curvature::new(c).map_err(|e| Error::Checkpoint(e.to_string()))?,
            }),
            other => return Err(Error::Checkpoint(format!("unknown space tag {other}"))),
        };
        let model = Model { spec, layers, head };

        let config = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
            clip_norm: r.f64()?,
        };
        let step = r.u64()?;
        let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.dim()).collect();
        let m = shapes.iter().map(|&s| r.tensor(s)).collect::<Result<Vec<_>>>()?;
        let v = shapes.iter().map(|&s| r.tensor(s)).collect::<Result<Vec<_>>>()?;
        let targets = TargetDistances {
            d0: r.f64()?,
            d1: r.f64()?,
            d2: r.f64()?,
            d3: r.f64()?,
            beta: r.f64()?,
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            adam: Adam { config, m, v, step },
            targets,
            seed,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
