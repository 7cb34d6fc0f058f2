//! Feedforward ReLU networks: validated storage, JSON weight files, forward
//! evaluation and Jacobians.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One affine layer `weights * a + bias`. Rows of `weights` are output neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl DenseLayer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Dimension(format!(
                "layer has {} rows but a bias of length {}",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::Dimension("empty layer".into()));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// A ReLU multilayer perceptron. Every layer but the last is followed by a ReLU;
/// the last layer is affine.
///
/// Immutable once built, so it can be shared freely between threads.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<DenseLayer>,
}

/// On-disk representation of a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightFile {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: String,
    pub layers: Vec<WeightFileLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightFileLayer {
    /// Row-major, one row per output neuron.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl MlpNetwork {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("network has no layers".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].inputs() != pair[0].outputs() {
                return Err(Error::Dimension(format!(
                    "layer {} expects {} inputs but layer {} produces {}",
                    l + 1,
                    pair[1].inputs(),
                    l,
                    pair[0].outputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Network with the given layer widths, parameters drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`. Used for tests and benchmarks.
    pub fn random<R: rand::Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Dimension("need at least input and output widths".into()));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weights = DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound));
                let bias = DVector::from_fn(w[1], |_, _| rng.random_range(-bound..bound));
                DenseLayer::new(weights, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// A network that is identically zero with the given input/output sizes.
    pub fn zero(input_dim: usize, output_dim: usize) -> Self {
        let layer = DenseLayer {
            weights: DMatrix::zeros(output_dim, input_dim),
            bias: DVector::zeros(output_dim),
        };
        Self { layers: vec![layer] }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    fn check_input(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network input has length {}, expected {}",
                z.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(z)?;
        let last = self.layers.len() - 1;
        let mut a = z.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = &layer.bias + &layer.weights * &a;
            if l != last {
                pre.apply(|v| *v = v.max(0.0));
            }
            a = pre;
        }
        Ok(a)
    }

    /// Jacobian of the output with respect to the input. A pre-activation of exactly
    /// zero is treated as inactive.
    pub fn jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_input(z)?;
        let last = self.layers.len() - 1;
        let mut a = z.clone();
        let mut jac = DMatrix::identity(z.len(), z.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let pre = &layer.bias + &layer.weights * &a;
            jac = &layer.weights * jac;
            if l == last {
                return Ok(jac);
            }
            for (i, &p) in pre.iter().enumerate() {
                if p <= 0.0 {
                    jac.row_mut(i).fill(0.0);
                }
            }
            a = pre.map(|v| v.max(0.0));
        }
        unreachable!("network has at least one layer")
    }

    /// Which hidden neurons are strictly active at `z`, layer by layer.
    pub fn activation_pattern(&self, z: &DVector<f64>) -> Result<Vec<Vec<bool>>> {
        self.check_input(z)?;
        let mut a = z.clone();
        let mut pattern = Vec::with_capacity(self.layers.len() - 1);
        for layer in &self.layers[..self.layers.len() - 1] {
            let pre = &layer.bias + &layer.weights * &a;
            pattern.push(pre.iter().map(|&p| p > 0.0).collect());
            a = pre.map(|v| v.max(0.0));
        }
        Ok(pattern)
    }

    pub fn to_weight_file(&self) -> WeightFile {
        WeightFile {
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            activation: "relu".into(),
            layers: self
                .layers
                .iter()
                .map(|layer| WeightFileLayer {
                    weights: layer
                        .weights
                        .row_iter()
                        .map(|row| row.iter().copied().collect())
                        .collect(),
                    bias: layer.bias.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        if file.activation != "relu" {
            return Err(Error::UnsupportedActivation(file.activation.clone()));
        }
        if file.layers.is_empty() {
            return Err(Error::Malformed("no layers".into()));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (l, layer) in file.layers.iter().enumerate() {
            let rows = layer.weights.len();
            let cols = layer.weights.first().map_or(0, Vec::len);
            if layer.weights.iter().any(|r| r.len() != cols) {
                return Err(Error::Malformed(format!("layer {l} has ragged weight rows")));
            }
            let weights = DMatrix::from_fn(rows, cols, |i, j| layer.weights[i][j]);
            let bias = DVector::from_column_slice(&layer.bias);
            layers.push(DenseLayer::new(weights, bias).map_err(|e| match e {
                Error::Dimension(msg) => Error::Dimension(format!("layer {l}: {msg}")),
                other => other,
            })?);
        }
        let net = Self::new(layers)?;
        if net.input_dim() != file.input_dim || net.output_dim() != file.output_dim {
            return Err(Error::Dimension(format!(
                "declared dims {}→{} but layers give {}→{}",
                file.input_dim,
                file.output_dim,
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(net)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: WeightFile =
            serde_json::from_str(s).map_err(|e| Error::Malformed(e.to_string()))?;
        Self::from_weight_file(&file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let file: WeightFile =
            serde_json::from_reader(reader).map_err(|e| Error::Malformed(e.to_string()))?;
        Self::from_weight_file(&file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let writer = BufWriter::new(File::create(path)?);
        serde_json::to_writer(writer, &self.to_weight_file())?;
        Ok(())
    }
}
