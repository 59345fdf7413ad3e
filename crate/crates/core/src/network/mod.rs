//! Encoder + projector MLP, the coarse-class head, and parameter plumbing.
//!
//! The network is a plain affine/ReLU stack. Gradients are hand-derived per
//! layer; [`gradcheck`] verifies them against central finite differences.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod objective;

pub use adam::{Adam, AdamConfig};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::Curvature;
use crate::mlr::MlrParams;

/// Layer widths of one MLP, input first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {layer_dims:?}")));
        }
        Ok(MlpSpec { layer_dims })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

/// Encoder and projector shapes. The projector reads the rectified encoder output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub encoder: MlpSpec,
    pub projector: MlpSpec,
}

impl NetworkSpec {
    pub fn new(encoder: MlpSpec, projector: MlpSpec) -> Result<Self> {
        if encoder.output_dim() != projector.input_dim() {
            return Err(Error::Config(format!(
                "encoder output {} does not feed projector input {}",
                encoder.output_dim(),
                projector.input_dim()
            )));
        }
        Ok(NetworkSpec { encoder, projector })
    }

    /// `d_in → 128 → 128` encoder, `128 → 128 → 32` projector.
    pub fn desk(d_in: usize) -> Self {
        NetworkSpec {
            encoder: MlpSpec { layer_dims: vec![d_in, 128, 128] },
            projector: MlpSpec { layer_dims: vec![128, 128, 32] },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.output_dim()
    }

    fn all_dims(&self) -> Vec<usize> {
        let mut dims = self.encoder.layer_dims.clone();
        dims.extend_from_slice(&self.projector.layer_dims[1..]);
        dims
    }
}

/// Whether embeddings are classified in the Poincaré ball or in flat space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Euclidean,
    Hyperbolic,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Euclidean => "euclidean",
            Space::Hyperbolic => "hyperbolic",
        }
    }
}

impl std::str::FromStr for Space {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" | "e" => Ok(Space::Euclidean),
            "hyperbolic" | "h" => Ok(Space::Hyperbolic),
            other => Err(Error::Config(format!("unknown space '{other}'"))),
        }
    }
}

/// Affine layer `y = x·W + b`, `W` is `in × out`, `b` is `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        Linear {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(rng)),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Output head on projector features.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// Poincaré MLR after the exponential map.
    Hyperbolic(MlrParams),
    /// Linear softmax classifier directly on projector outputs.
    Linear(Linear),
}

/// Full learnable model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    /// Encoder layers followed by projector layers.
    pub layers: Vec<Linear>,
    pub head: Head,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation outputs of each layer.
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    /// Rectified encoder output.
    pub fn encoder_out(&self, spec: &NetworkSpec) -> &Array2<f64> {
        &self.inputs[spec.encoder.n_layers()]
    }

    /// Projector output (no activation on the last layer).
    pub fn projector_out(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }
}

impl Model {
    pub fn init<R: Rng + ?Sized>(
        spec: NetworkSpec,
        n_coarse: usize,
        space: Space,
        curvature: Curvature,
        rng: &mut R,
    ) -> Self {
        let dims = spec.all_dims();
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        let embed = spec.embed_dim();
        let head = match space {
            Space::Hyperbolic => Head::Hyperbolic(MlrParams::init(n_coarse, embed, curvature, rng)),
            Space::Euclidean => Head::Linear(Linear::init(embed, n_coarse, rng)),
        };
        Model { spec, layers, head }
    }

    pub fn space(&self) -> Space {
        match self.head {
            Head::Hyperbolic(_) => Space::Hyperbolic,
            Head::Linear(_) => Space::Euclidean,
        }
    }

    pub fn n_coarse(&self) -> usize {
        match &self.head {
            Head::Hyperbolic(p) => p.n_classes(),
            Head::Linear(l) => l.weight.ncols(),
        }
    }

    pub fn curvature(&self) -> Option<Curvature> {
        match &self.head {
            Head::Hyperbolic(p) => Some(p.curvature),
            Head::Linear(_) => None,
        }
    }

    /// Runs the encoder and projector on a batch (rows are samples).
    pub fn forward(&self, x: &Array2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.spec.input_dim() {
            return Err(Error::Contract(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.spec.input_dim()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h);
            inputs.push(h);
            h = if l + 1 < n { y.mapv(|v| v.max(0.0)) } else { y.clone() };
            pre.push(y);
        }
        inputs.push(h);
        Ok(ForwardCache { inputs, pre })
    }

    /// Encoder and projector outputs for a batch.
    pub fn embed(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let cache = self.forward(x)?;
        Ok((cache.encoder_out(&self.spec).clone(), cache.projector_out().clone()))
    }

    /// Backpropagates `grad_out` (w.r.t. the projector output) into the layer
    /// gradients, which are accumulated into `grads` in [`Model::params`] order.
    pub(crate) fn backward(&self, cache: &ForwardCache, grad_out: Array2<f64>, grads: &mut Gradients) {
        let n = self.layers.len();
        let mut g = grad_out;
        for l in (0..n).rev() {
            if l + 1 < n {
                let pre = &cache.pre[l];
                g.zip_mut_with(pre, |gi, &p| {
                    if p <= 0.0 {
                        *gi = 0.0;
                    }
                });
            }
            let input = &cache.inputs[l];
            grads.0[2 * l] += &input.t().dot(&g);
            grads.0[2 * l + 1] += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
            if l > 0 {
                g = g.dot(&self.layers[l].weight.t());
            }
        }
    }

    /// Every learnable tensor in a fixed order: per layer weight then bias,
    /// followed by the head (`p_raw`, `a` or weight, bias).
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = Vec::new();
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        match &self.head {
            Head::Hyperbolic(p) => {
                out.push(&p.p_raw);
                out.push(&p.a);
            }
            Head::Linear(l) => {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        match &mut self.head {
            Head::Hyperbolic(p) => {
                out.push(&mut p.p_raw);
                out.push(&mut p.a);
            }
            Head::Linear(l) => {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Names matching [`Model::params`].
    pub fn param_names(&self) -> Vec<String> {
        let n_enc = self.spec.encoder.n_layers();
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            let prefix = if l < n_enc {
                format!("encoder.{l}")
            } else {
                format!("projector.{}", l - n_enc)
            };
            names.push(format!("{prefix}.weight"));
            names.push(format!("{prefix}.bias"));
        }
        match self.head {
            Head::Hyperbolic(_) => {
                names.push("mlr.p_raw".into());
                names.push("mlr.a".into());
            }
            Head::Linear(_) => {
                names.push("head.weight".into());
                names.push("head.bias".into());
            }
        }
        names
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect())
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Gradients aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Array2<f64>>);

impl Gradients {
    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(space: Space) -> Model {
        let spec = NetworkSpec::new(
            MlpSpec::new(vec![3, 4]).unwrap(),
            MlpSpec::new(vec![4, 5, 2]).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Model::init(spec, 3, space, Curvature::default(), &mut rng)
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0]).is_err());
        let e = MlpSpec::new(vec![3, 4]).unwrap();
        let p = MlpSpec::new(vec![5, 2]).unwrap();
        assert!(NetworkSpec::new(e, p).is_err());
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let mut model = tiny_model(Space::Euclidean);
        for p in model.params_mut() {
            p.fill(0.0);
        }
        let (enc, proj) = model.embed(&array![[1.0, -2.0, 3.0]]).unwrap();
        assert!(enc.iter().all(|&v| v == 0.0));
        assert!(proj.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let spec = NetworkSpec {
            encoder: MlpSpec { layer_dims: vec![3, 3] },
            projector: MlpSpec { layer_dims: vec![3] },
        };
        let model = Model {
            spec,
            layers: vec![Linear {
                weight: Array2::eye(3),
                bias: Array2::zeros((1, 3)),
            }],
            head: Head::Linear(Linear {
                weight: Array2::eye(3),
                bias: Array2::zeros((1, 3)),
            }),
        };
        let x = array![[1.0, -2.0, 0.5], [0.0, 4.0, -1.0]];
        let cache = model.forward(&x).unwrap();
        assert_eq!(cache.projector_out(), &x);
    }

    #[test]
    fn two_layer_forward_matches_hand_arithmetic() {
        let spec = NetworkSpec {
            encoder: MlpSpec { layer_dims: vec![2, 2] },
            projector: MlpSpec { layer_dims: vec![2, 1] },
        };
        let model = Model {
            spec,
            layers: vec![
                Linear {
                    weight: array![[1.0, -1.0], [2.0, 0.5]],
                    bias: array![[0.1, -0.2]],
                },
                Linear {
                    weight: array![[3.0], [-2.0]],
                    bias: array![[0.5]],
                },
            ],
            head: Head::Linear(Linear {
                weight: array![[1.0]],
                bias: array![[0.0]],
            }),
        };
        let (enc, proj) = model.embed(&array![[1.0, 2.0]]).unwrap();
        // Layer 1: (1·1 + 2·2 + 0.1, 1·(−1) + 2·0.5 − 0.2) = (5.1, −0.2) → ReLU (5.1, 0).
        assert_eq!(enc, array![[5.1, 0.0]]);
        // Layer 2: 5.1·3 + 0·(−2) + 0.5 = 15.8.
        assert!((proj[[0, 0]] - 15.8).abs() < 1e-12);
    }

    #[test]
    fn input_width_is_checked() {
        let model = tiny_model(Space::Hyperbolic);
        assert!(matches!(model.forward(&array![[1.0, 2.0]]), Err(Error::Contract(_))));
    }

    #[test]
    fn param_names_align() {
        let model = tiny_model(Space::Hyperbolic);
        let names = model.param_names();
        assert_eq!(names.len(), model.params().len());
        assert_eq!(names[0], "encoder.0.weight");
        assert_eq!(names[2], "projector.0.weight");
        assert_eq!(names.last().unwrap(), "mlr.a");
    }
}
