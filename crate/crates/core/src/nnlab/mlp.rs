//! Multilayer perceptron with ReLU hidden layers and a linear output, trained
//! against binary cross-entropy on the sigmoid of its single output.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{bce_loss, relu, sigmoid, DenseLayer, Objective, PROB_EPS};
use crate::error::{Error, Result};

pub const WEIGHT_FORMAT: &str = "cfw-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Per-layer gradients, same shapes as the layer parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Mlp> {
        if layers.is_empty() {
            return Err(Error::shape("at least one layer", 0));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    format!("layer input {}", pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Mlp> {
        check_dims(dims)?;
        Mlp::new(dims.windows(2).map(|w| DenseLayer::glorot(w[0], w[1], rng)).collect())
    }

    pub fn zeros(dims: &[usize]) -> Result<Mlp> {
        check_dims(dims)?;
        Mlp::new(dims.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim()));
        dims
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights().len() + l.bias().len()).sum()
    }

    /// Output of the last layer before any squashing.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h.mapv_inplace(relu);
            h = layer.forward(h.view())?;
        }
        Ok(h)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut h = self.layers[0].forward_batch(x)?;
        for layer in &self.layers[1..] {
            h.mapv_inplace(relu);
            h = layer.forward_batch(h.view())?;
        }
        Ok(h)
    }

    /// Mean BCE of `sigmoid(output)` against `labels`, and its gradient.
    pub fn bce_backward(&self, x: ArrayView2<f64>, labels: &[f64]) -> Result<(f64, MlpGrads)> {
        let n = x.nrows();
        if n == 0 || labels.len() != n {
            return Err(Error::shape(format!("{n} labels for a non-empty batch"), labels.len()));
        }
        if self.layers.last().map(|l| l.out_dim()) != Some(1) {
            return Err(Error::shape("single output unit", self.dims().last().copied().unwrap_or(0)));
        }

        // activations[0] = input, activations[l] = relu(z_l) for hidden layers.
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut h = self.layers[0].forward_batch(x)?;
        for layer in &self.layers[1..] {
            let a = h.mapv(relu);
            pre.push(h);
            h = layer.forward_batch(a.view())?;
            acts.push(a);
        }
        let logits = h;

        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut grad = Array2::zeros((n, 1));
        for i in 0..n {
            let p = sigmoid(logits[[i, 0]]);
            let y = labels[i];
            loss += bce_loss(p, y);
            let inside = p > PROB_EPS && p < 1.0 - PROB_EPS;
            grad[[i, 0]] = if inside { (p - y) * inv_n } else { 0.0 };
        }
        loss *= inv_n;

        let depth = self.layers.len();
        let mut weights = vec![Array2::zeros((0, 0)); depth];
        let mut biases = vec![Array1::zeros(0); depth];
        for l in (0..depth).rev() {
            let input = if l == 0 { x } else { acts[l - 1].view() };
            weights[l] = grad.t().dot(&input);
            biases[l] = grad.sum_axis(Axis(0));
            if l > 0 {
                let mut upstream = grad.dot(self.layers[l].weights());
                ndarray::Zip::from(&mut upstream)
                    .and(&pre[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
                grad = upstream;
            }
        }
        Ok((loss, MlpGrads { weights, biases }))
    }

    /// Mutable flat views of every parameter tensor, weights then bias per layer.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            let (w, b) = layer.params_mut();
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights().len(), l.bias().len()])
            .collect()
    }

    pub fn to_weight_file(&self) -> WeightFile {
        WeightFile {
            format: WEIGHT_FORMAT.to_string(),
            dims: self.dims(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    w: l.weights().iter().copied().collect(),
                    b: l.bias().to_vec(),
                })
                .collect(),
            meta: None,
        }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Mlp> {
        if file.format != WEIGHT_FORMAT {
            return Err(Error::Validation(format!(
                "unsupported weight format {:?}, expected {WEIGHT_FORMAT}",
                file.format
            )));
        }
        check_dims(&file.dims)?;
        if file.layers.len() != file.dims.len() - 1 {
            return Err(Error::shape(
                format!("{} layers for dims {:?}", file.dims.len() - 1, file.dims),
                file.layers.len(),
            ));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, (lw, dims)) in file.layers.iter().zip(file.dims.windows(2)).enumerate() {
            let (fan_in, fan_out) = (dims[0], dims[1]);
            if lw.w.len() != fan_in * fan_out {
                return Err(Error::shape(
                    format!("layer {i} weights of length {}", fan_in * fan_out),
                    lw.w.len(),
                ));
            }
            if lw.b.len() != fan_out {
                return Err(Error::shape(format!("layer {i} bias of length {fan_out}"), lw.b.len()));
            }
            let w = Array2::from_shape_vec((fan_out, fan_in), lw.w.clone())
                .map_err(|e| Error::shape(format!("{fan_out}x{fan_in}"), e))?;
            layers.push(DenseLayer::new(w, Array1::from(lw.b.clone()))?);
        }
        Mlp::new(layers)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::shape("at least two positive dims", format!("{dims:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// Row-major `out × in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// On-disk weight file: `{"format":"cfw-v1","dims":[...],"layers":[{"w":[...],"b":[...]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub format: String,
    pub dims: Vec<usize>,
    pub layers: Vec<LayerWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl WeightFile {
    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer(writer, self)?;
        Ok(())
    }

    pub fn read_from<R: Read>(reader: R) -> Result<WeightFile> {
        Ok(serde_json::from_reader(reader)?)
    }
}

/// Mean BCE of an [`Mlp`] over a fixed batch, exposed for gradient checking.
pub struct MlpObjective {
    pub mlp: Mlp,
    pub inputs: Array2<f64>,
    pub labels: Vec<f64>,
    offsets: Vec<usize>,
}

impl MlpObjective {
    pub fn new(mlp: Mlp, inputs: Array2<f64>, labels: Vec<f64>) -> MlpObjective {
        let mut offsets = vec![0];
        for size in mlp.param_sizes() {
            offsets.push(offsets.last().unwrap() + size);
        }
        MlpObjective {
            mlp,
            inputs,
            labels,
            offsets,
        }
    }

    fn locate(&self, index: usize) -> (usize, usize) {
        let tensor = self.offsets.partition_point(|&o| o <= index) - 1;
        (tensor, index - self.offsets[tensor])
    }

    /// Index range of the given tensor (weights of layer `l` are tensor `2l`).
    pub fn tensor_range(&self, tensor: usize) -> std::ops::Range<usize> {
        self.offsets[tensor]..self.offsets[tensor + 1]
    }
}

impl Objective for MlpObjective {
    fn num_params(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn get(&self, index: usize) -> f64 {
        let (t, j) = self.locate(index);
        let layer = &self.mlp.layers[t / 2];
        if t % 2 == 0 {
            layer.weights().as_slice().unwrap()[j]
        } else {
            layer.bias()[j]
        }
    }

    fn set(&mut self, index: usize, value: f64) {
        let (t, j) = self.locate(index);
        let (w, b) = self.mlp.layers[t / 2].params_mut();
        if t % 2 == 0 {
            w[j] = value;
        } else {
            b[j] = value;
        }
    }

    fn loss(&self) -> f64 {
        match self.mlp.forward_batch(self.inputs.view()) {
            Ok(out) => {
                let n = self.labels.len() as f64;
                out.column(0)
                    .iter()
                    .zip(&self.labels)
                    .map(|(&z, &y)| bce_loss(sigmoid(z), y))
                    .sum::<f64>()
                    / n
            }
            Err(_) => f64::NAN,
        }
    }

    fn gradient(&self) -> Vec<f64> {
        let (_, grads) = self
            .mlp
            .bce_backward(self.inputs.view(), &self.labels)
            .expect("objective batch is well-formed");
        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            flat.extend(w.iter());
            flat.extend(b.iter());
        }
        flat
    }
}
