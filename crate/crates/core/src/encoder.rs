//! The trainable point-cloud backbone.
//!
//! A shared per-point MLP with ReLU, a max-pool over the points of each
//! cloud, and a linear projection into the shared embedding space followed
//! by L2 normalization. Every per-point row is computed independently and
//! max is order-free, so the embedding is bitwise invariant to point order.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Bias value every layer starts from. Nonzero so the pooled feature, and
/// hence the embedding, cannot vanish at initialization.
pub const INIT_BIAS: f32 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Output widths of the per-point layers; the input width is 3.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { widths: vec![64, 128, 256], embed_dim: 512 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::BadArchitecture("at least one per-point layer is required".into()));
        }
        if let Some(i) = self.widths.iter().position(|&w| w == 0) {
            return Err(Error::BadArchitecture(format!("layer {i} has zero width")));
        }
        if self.embed_dim < 2 {
            return Err(Error::BadArchitecture(format!("embedding dimension {} < 2", self.embed_dim)));
        }
        Ok(())
    }
}

/// A fully connected layer: `y = x · weight + bias`, weight stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// He-uniform weights, `U(-√(6/fan_in), √(6/fan_in))`, constant bias.
    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize, bias: f32) -> Dense {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound) as f32).collect();
        Dense {
            weight: Tensor::from_parts(vec![fan_in, fan_out], w),
            bias: Tensor::from_parts(vec![fan_out], vec![bias; fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Variance of the He-uniform initializer for a given fan-in.
pub fn init_weight_variance(fan_in: usize) -> f64 {
    2.0 / fan_in as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    seed: u64,
    layers: Vec<Dense>,
    projection: Dense,
}

/// Graph handles for one binding of [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub layers: Vec<(Var, Var)>,
    pub projection: (Var, Var),
}

impl EncoderVars {
    /// Weight and bias handles in [`EncoderParams::blocks`] order.
    pub fn all(&self) -> Vec<Var> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.projection))
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

impl EncoderParams {
    pub fn init(seed: u64, widths: &[usize], embed_dim: usize) -> Result<Self> {
        let config = EncoderConfig { widths: widths.to_vec(), embed_dim };
        config.validate()?;
        let root = Rng::new(seed, 0);
        let mut fan_in = 3;
        let mut layers = Vec::with_capacity(widths.len());
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Dense::init(&mut root.derive("encoder.mlp", i as u64), fan_in, w, INIT_BIAS));
            fan_in = w;
        }
        let projection = Dense::init(&mut root.derive("encoder.projection", 0), fan_in, embed_dim, INIT_BIAS);
        Ok(EncoderParams { config, seed, layers, projection })
    }

    pub fn from_config(seed: u64, config: &EncoderConfig) -> Result<Self> {
        Self::init(seed, &config.widths, config.embed_dim)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn projection(&self) -> &Dense {
        &self.projection
    }

    /// Named parameter blocks in a fixed order: each MLP layer's weight and
    /// bias, then the projection's.
    pub fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("mlp.{i}.weight"), &l.weight));
            out.push((format!("mlp.{i}.bias"), &l.bias));
        }
        out.push(("projection.weight".into(), &self.projection.weight));
        out.push(("projection.bias".into(), &self.projection.bias));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.projection))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Rebuilds parameters from blocks in [`EncoderParams::blocks`] order.
    pub fn from_blocks(seed: u64, config: EncoderConfig, blocks: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = 2 * (config.widths.len() + 1);
        if blocks.len() != expected {
            return Err(Error::ShapeMismatch(format!("{} parameter blocks, expected {expected}", blocks.len())));
        }
        let mut it = blocks.into_iter();
        let mut fan_in = 3;
        let mut take = |fan_in: usize, fan_out: usize| -> Result<Dense> {
            let weight = it.next().unwrap();
            let bias = it.next().unwrap();
            if weight.shape() != [fan_in, fan_out] || bias.shape() != [fan_out] {
                return Err(Error::ShapeMismatch(format!(
                    "layer {fan_in}->{fan_out} got weight {:?} bias {:?}",
                    weight.shape(),
                    bias.shape()
                )));
            }
            Ok(Dense { weight, bias })
        };
        let mut layers = Vec::new();
        for &w in &config.widths {
            layers.push(take(fan_in, w)?);
            fan_in = w;
        }
        let projection = take(fan_in, config.embed_dim)?;
        Ok(EncoderParams { config, seed, layers, projection })
    }

    /// Places the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let mut leaf = |t: &Tensor| if trainable { g.parameter(t.clone()) } else { g.constant(t.clone()) };
        let layers = self.layers.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect();
        let projection = (leaf(&self.projection.weight), leaf(&self.projection.bias));
        EncoderVars { layers, projection }
    }

    /// Differentiable batch forward: returns unit-norm embeddings `[B, D]`.
    pub fn forward(&self, g: &mut Graph, vars: &EncoderVars, clouds: &[PointCloud]) -> Result<Var> {
        let n = check_batch(clouds)?;
        let mut flat = Vec::with_capacity(clouds.len() * n * 3);
        for c in clouds {
            flat.extend(c.points().iter().flatten());
        }
        let mut x = g.constant(Tensor::new(vec![clouds.len() * n, 3], flat)?);
        for &(w, b) in &vars.layers {
            let h = g.matmul(x, w)?;
            let h = g.add_bias(h, b)?;
            x = g.relu(h)?;
        }
        let pooled = g.max_pool(x, clouds.len())?;
        let z = g.matmul(pooled, vars.projection.0)?;
        let z = g.add_bias(z, vars.projection.1)?;
        g.l2_normalize_rows(z)
    }
}

fn check_batch(clouds: &[PointCloud]) -> Result<usize> {
    let first = clouds.first().ok_or(Error::EmptyCloud)?;
    let n = first.len();
    for (index, c) in clouds.iter().enumerate() {
        if c.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if c.len() != n {
            return Err(Error::RaggedBatch { index, expected: n, got: c.len() });
        }
    }
    Ok(n)
}

/// Anything that maps point clouds into the shared embedding space.
pub trait PointEncoder {
    fn embed_dim(&self) -> usize;

    /// Unit-norm embeddings, one row per cloud. All clouds must have the same point count.
    fn encode_batch(&self, clouds: &[PointCloud]) -> Result<Tensor>;

    fn encode(&self, pc: &PointCloud) -> Result<Vec<f32>> {
        Ok(self.encode_batch(std::slice::from_ref(pc))?.into_data())
    }
}

impl PointEncoder for EncoderParams {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn encode_batch(&self, clouds: &[PointCloud]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, clouds)?;
        Ok(g.value(out).clone())
    }
}

pub fn encode(params: &EncoderParams, pc: &PointCloud) -> Result<Vec<f32>> {
    params.encode(pc)
}

pub fn encode_batch(params: &EncoderParams, clouds: &[PointCloud]) -> Result<Tensor> {
    params.encode_batch(clouds)
}

/// Linear classification head on top of the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    /// `U(-1/√D, 1/√D)` weights, zero bias.
    pub fn init(seed: u64, embed_dim: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::BadArchitecture(format!("classifier needs at least 2 classes, got {classes}")));
        }
        if embed_dim == 0 {
            return Err(Error::BadArchitecture("classifier input width is zero".into()));
        }
        let mut rng = Rng::new(seed, 0).derive("classifier", 0);
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let w = (0..embed_dim * classes).map(|_| rng.uniform_range(-bound, bound) as f32).collect();
        Ok(ClassifierHead {
            weight: Tensor::from_parts(vec![embed_dim, classes], w),
            bias: Tensor::zeros(vec![classes]),
        })
    }

    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (d, c) = tensor::matrix_dims(&weight, "classifier weight")?;
        if bias.shape() != [c] || c < 2 || d == 0 {
            return Err(Error::ShapeMismatch(format!(
                "classifier weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(ClassifierHead { weight, bias })
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> (Var, Var) {
        if trainable {
            (g.parameter(self.weight.clone()), g.parameter(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        }
    }
}

/// Logits `embedding · W + b`.
pub fn classify(head: &ClassifierHead, embedding: &[f32]) -> Result<Vec<f32>> {
    let d = head.embed_dim();
    if embedding.len() != d {
        return Err(Error::ShapeMismatch(format!("embedding of width {} for a {d}-wide head", embedding.len())));
    }
    let c = head.classes();
    let mut out = vec![0.0f64; c];
    for (i, &e) in embedding.iter().enumerate() {
        let row = &head.weight.data()[i * c..(i + 1) * c];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += f64::from(e) * f64::from(w);
        }
    }
    Ok(out.iter().zip(head.bias.data()).map(|(&o, &b)| (o + f64::from(b)) as f32).collect())
}
