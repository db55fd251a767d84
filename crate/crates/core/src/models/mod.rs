//! Model parameterization: MLP encoders, linear classifier heads, task
//! vectors and checkpoints.
//!
//! Encoder layers are stored as `enc.{i}.weight` (`in × out`) and
//! `enc.{i}.bias` (`out`). A head is stored as `{prefix}weight` (`d × C`)
//! and, when present, `{prefix}bias` (`C`).

pub mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{Layer, ModelParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{argmax, Matrix, Rng};

pub const ENCODER_PREFIX: &str = "enc.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dims: vec![64, 64],
            embed_dim: 32,
        }
    }
}

impl Architecture {
    /// `(fan_in, fan_out)` for every layer, input to embedding.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self
            .hidden_dims
            .iter()
            .chain(std::iter::once(&self.embed_dim))
        {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

fn weight_name(i: usize) -> String {
    format!("{ENCODER_PREFIX}{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("{ENCODER_PREFIX}{i}.bias")
}

/// Glorot-uniform matrix.
fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_raw(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect(),
    )
}

/// Activations kept from a forward pass for backpropagation.
pub(crate) struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the batch itself).
    inputs: Vec<Matrix>,
    pub(crate) output: Matrix,
}

/// Tanh MLP; every layer but the last is followed by tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    arch: Architecture,
    params: ModelParams,
}

impl MlpEncoder {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ModelParams::new();
        for (i, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
            params.push(Layer::from_matrix(
                weight_name(i),
                &glorot(fan_in, fan_out, rng),
            ))?;
            params.push(Layer::from_vector(bias_name(i), &vec![0.0; fan_out]))?;
        }
        Ok(Self {
            arch: arch.clone(),
            params,
        })
    }

    /// Rebuild from parameters, inferring the architecture from the
    /// `enc.*` layers. Other layers are ignored.
    pub fn from_params(params: &ModelParams) -> Result<Self> {
        let enc = params.filter_prefix(ENCODER_PREFIX);
        if enc.is_empty() || !enc.layers().len().is_multiple_of(2) {
            return Err(Error::Structure(format!(
                "expected weight/bias pairs under {ENCODER_PREFIX}, found {} layers",
                enc.layers().len()
            )));
        }
        let n_layers = enc.layers().len() / 2;
        let mut dims = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (w, b) = (&enc.layers()[2 * i], &enc.layers()[2 * i + 1]);
            let ok_names = w.name() == weight_name(i) && b.name() == bias_name(i);
            match (ok_names, w.shape(), b.shape()) {
                (true, &[r, c], &[bc]) if bc == c => dims.push((r, c)),
                _ => {
                    return Err(Error::Structure(format!(
                        "encoder layer {i} malformed: {}{:?} / {}{:?}",
                        w.name(),
                        w.shape(),
                        b.name(),
                        b.shape()
                    )))
                }
            }
        }
        for pair in dims.windows(2) {
            if pair[0].1 != pair[1].0 {
                return Err(Error::Structure(format!(
                    "encoder layer widths do not chain: {dims:?}"
                )));
            }
        }
        let arch = Architecture {
            input_dim: dims[0].0,
            hidden_dims: dims[..n_layers - 1].iter().map(|d| d.1).collect(),
            embed_dim: dims[n_layers - 1].1,
        };
        Ok(Self { arch, params: enc })
    }

    /// Same architecture with replacement parameters.
    pub fn with_params(&self, params: ModelParams) -> Result<Self> {
        self.params.check_homologous(&params)?;
        Ok(Self {
            arch: self.arch.clone(),
            params,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    fn num_layers(&self) -> usize {
        self.arch.hidden_dims.len() + 1
    }

    fn layer_weight(&self, i: usize) -> Matrix {
        let l = &self.params.layers()[2 * i];
        Matrix::from_raw(l.shape()[0], l.shape()[1], l.values().to_vec())
    }

    fn layer_bias(&self, i: usize) -> &[f64] {
        self.params.layers()[2 * i + 1].values()
    }

    /// Embeddings (`n × embed_dim`) of a batch.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.output)
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects {} input features, batch has {}",
                self.arch.input_dim,
                x.cols()
            )));
        }
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut h = x.clone();
        for i in 0..self.num_layers() {
            let mut z = h.matmul(&self.layer_weight(i))?;
            z.add_row_vector(self.layer_bias(i))?;
            if i < last {
                z = z.map(f64::tanh);
            }
            inputs.push(h);
            h = z;
        }
        Ok(ForwardCache { inputs, output: h })
    }

    /// Gradients of every encoder tensor given `dL/d(embedding)`.
    pub(crate) fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<ModelParams> {
        let n_layers = self.num_layers();
        let mut grads: Vec<Option<(Matrix, Vec<f64>)>> = vec![None; n_layers];
        let mut delta = d_out.clone();
        for i in (0..n_layers).rev() {
            let input = &cache.inputs[i];
            let d_w = input.transpose().matmul(&delta)?;
            let d_b = delta.column_sums();
            if i > 0 {
                // input = tanh(z) of the previous layer, tanh' = 1 - tanh².
                let d_in = delta.matmul(&self.layer_weight(i).transpose())?;
                delta = d_in.hadamard(&input.map(|a| 1.0 - a * a))?;
            }
            grads[i] = Some((d_w, d_b));
        }
        let mut out = ModelParams::new();
        for (i, g) in grads.into_iter().enumerate() {
            let (d_w, d_b) = g.expect("every layer visited");
            out.push(Layer::from_matrix(weight_name(i), &d_w))?;
            out.push(Layer::from_vector(bias_name(i), &d_b))?;
        }
        Ok(out)
    }
}

/// Linear classifier head: `logits = emb · weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    weight: Matrix,
    bias: Option<Vec<f64>>,
}

impl ClassifierHead {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(Error::Shape(format!(
                    "head bias of length {} for {} classes",
                    b.len(),
                    weight.cols()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    /// Glorot-uniform weight; zero bias when `use_bias`.
    pub fn init(embed_dim: usize, num_classes: usize, use_bias: bool, rng: &mut Rng) -> Self {
        Self {
            weight: glorot(embed_dim, num_classes, rng),
            bias: use_bias.then(|| vec![0.0; num_classes]),
        }
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, emb: &Matrix) -> Result<Matrix> {
        let mut z = emb.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            z.add_row_vector(b)?;
        }
        Ok(z)
    }

    pub fn to_params(&self, prefix: &str) -> ModelParams {
        let mut layers = vec![Layer::from_matrix(format!("{prefix}weight"), &self.weight)];
        if let Some(b) = &self.bias {
            layers.push(Layer::from_vector(format!("{prefix}bias"), b));
        }
        ModelParams::from_layers(layers).expect("distinct names")
    }

    pub fn from_params(params: &ModelParams, prefix: &str) -> Result<Self> {
        let weight = params.require(&format!("{prefix}weight"))?.to_matrix()?;
        let bias = params
            .get(&format!("{prefix}bias"))
            .map(|l| l.values().to_vec());
        Self::new(weight, bias)
    }
}

/// Row-wise argmax, ties to the lowest class index.
pub fn predictions(logits: &Matrix) -> Vec<usize> {
    logits.row_iter().map(argmax).collect()
}

/// Fine-tuned model for one task: encoder plus its classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub task_id: usize,
    pub encoder: MlpEncoder,
    pub head: ClassifierHead,
}

impl TaskModel {
    pub fn new(task_id: usize, encoder: MlpEncoder, head: ClassifierHead) -> Result<Self> {
        if encoder.embed_dim() != head.embed_dim() {
            return Err(Error::Shape(format!(
                "encoder embeds into {} dims but head expects {}",
                encoder.embed_dim(),
                head.embed_dim()
            )));
        }
        Ok(Self {
            task_id,
            encoder,
            head,
        })
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.head.logits(&self.encoder.encode(x)?)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(predictions(&self.logits(x)?))
    }

    /// Encoder layers followed by `head.*` layers.
    pub fn to_params(&self) -> ModelParams {
        self.encoder
            .params()
            .concat(&self.head.to_params(HEAD_PREFIX))
            .expect("encoder and head names are disjoint")
    }

    pub fn from_params(task_id: usize, params: &ModelParams) -> Result<Self> {
        let encoder = MlpEncoder::from_params(params)?;
        let head = ClassifierHead::from_params(params, HEAD_PREFIX)?;
        Self::new(task_id, encoder, head)
    }
}

/// `Δ = Θ_t − Θ_b` over encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub delta: ModelParams,
}

impl TaskVector {
    /// `Θ_b + Δ`.
    pub fn apply(&self, theta_b: &ModelParams) -> Result<ModelParams> {
        theta_b.add(&self.delta)
    }
}

pub fn task_vector(theta_t: &ModelParams, theta_b: &ModelParams) -> Result<TaskVector> {
    Ok(TaskVector {
        delta: theta_t.sub(theta_b)?,
    })
}
