use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// One named tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Layer {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "layer {name}: shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            values: m.as_slice().to_vec(),
        }
    }

    pub fn from_vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            values: v.to_vec(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// View a rank-2 layer as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            &[r, c] => Matrix::new(r, c, self.values.clone()),
            other => Err(Error::Shape(format!(
                "layer {} has shape {other:?}, expected a matrix",
                self.name
            ))),
        }
    }
}

/// Ordered collection of named tensors: the unit of merging arithmetic.
///
/// Two sets are *homologous* when their (name, shape) lists are identical,
/// order included.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Structure(format!("duplicate layer name {}", l.name)));
            }
        }
        Ok(Self { layers })
    }

    pub fn push(&mut self, layer: Layer) -> Result<()> {
        if self.get(&layer.name).is_some() {
            return Err(Error::Structure(format!(
                "duplicate layer name {}",
                layer.name
            )));
        }
        self.layers.push(layer);
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Layer> {
        self.get(name)
            .ok_or_else(|| Error::Structure(format!("missing layer {name}")))
    }

    /// Total number of scalar values across layers.
    pub fn num_values(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    /// Layers whose name starts with `prefix`, in order.
    pub fn filter_prefix(&self, prefix: &str) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .filter(|l| l.name.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    /// Concatenation of two disjoint parameter sets.
    pub fn concat(&self, other: &ModelParams) -> Result<ModelParams> {
        let mut out = self.clone();
        for l in &other.layers {
            out.push(l.clone())?;
        }
        Ok(out)
    }

    pub fn is_homologous(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Structure error listing every position where the layouts disagree.
    pub fn check_homologous(&self, other: &ModelParams) -> Result<()> {
        if self.is_homologous(other) {
            return Ok(());
        }
        let describe = |l: Option<&Layer>| match l {
            Some(l) => format!("{}{:?}", l.name, l.shape),
            None => "<none>".to_string(),
        };
        let n = self.layers.len().max(other.layers.len());
        let mismatches: Vec<String> = (0..n)
            .filter_map(|i| {
                let (a, b) = (self.layers.get(i), other.layers.get(i));
                let same =
                    matches!((a, b), (Some(a), Some(b)) if a.name == b.name && a.shape == b.shape);
                (!same).then(|| format!("#{i}: {} vs {}", describe(a), describe(b)))
            })
            .collect();
        Err(Error::Structure(format!(
            "parameter sets are not homologous: {}",
            mismatches.join("; ")
        )))
    }

    /// Elementwise combination of two homologous sets.
    pub fn zip_map(&self, other: &ModelParams, f: impl Fn(f64, f64) -> f64) -> Result<ModelParams> {
        self.check_homologous(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Layer {
                name: a.name.clone(),
                shape: a.shape.clone(),
                values: a
                    .values
                    .iter()
                    .zip(&b.values)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            })
            .collect();
        Ok(ModelParams { layers })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    shape: l.shape.clone(),
                    values: l.values.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
        }
    }

    pub fn add(&self, other: &ModelParams) -> Result<ModelParams> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ModelParams) -> Result<ModelParams> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> ModelParams {
        self.map(|v| v * c)
    }

    pub fn zeros_like(&self) -> ModelParams {
        self.map(|_| 0.0)
    }

    /// All values concatenated in layer order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.values.iter().copied())
            .collect()
    }

    /// Same layout, values replaced from a flat buffer.
    pub fn with_flat_values(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "flat buffer of length {} for {} parameters",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let n = l.values.len();
                let values = flat[offset..offset + n].to_vec();
                offset += n;
                Layer {
                    name: l.name.clone(),
                    shape: l.shape.clone(),
                    values,
                }
            })
            .collect();
        Ok(ModelParams { layers })
    }

    /// Equality of layout and of every value's bit pattern.
    pub fn bitwise_eq(&self, other: &ModelParams) -> bool {
        self.is_homologous(other)
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.values
                    .iter()
                    .zip(&b.values)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.values.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
