use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Fully connected layer `y = W x + b` with `W` stored `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<DenseLayer> {
        let (out_dim, in_dim) = weights.dim();
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::shape("positive layer dimensions", format!("{out_dim}x{in_dim}")));
        }
        if bias.len() != out_dim {
            return Err(Error::shape(format!("bias of length {out_dim}"), bias.len()));
        }
        if !weights.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::Validation("layer parameters must be finite".into()));
        }
        // Keep standard layout so parameters can be exposed as flat slices.
        let weights = weights.as_standard_layout().into_owned();
        Ok(DenseLayer { weights, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> DenseLayer {
        DenseLayer {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> DenseLayer {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || rng.random_range(-limit..limit));
        DenseLayer {
            weights,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("contiguous bias"),
        )
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(format!("input of length {}", self.in_dim()), x.len()));
        }
        Ok(self.weights.dot(&x) + &self.bias)
    }

    /// Row-wise forward pass for a batch stored `n × in_dim`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape(format!("batch with {} columns", self.in_dim()), x.ncols()));
        }
        let mut out = x.dot(&self.weights.t());
        out += &self.bias.view().insert_axis(Axis(0));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_layer_annihilates() {
        let layer = DenseLayer::zeros(3, 2);
        let y = layer.forward(array![1.0, -2.0, 3.5].view()).unwrap();
        assert_eq!(y, array![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_through() {
        let layer = DenseLayer::new(Array2::eye(4), Array1::zeros(4)).unwrap();
        let x = array![0.5, -1.0, 2.0, 7.25];
        assert_eq!(layer.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn matches_naive_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-2.0..2.0));
            let b = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let layer = DenseLayer::new(w.clone(), b.clone()).unwrap();
            let got = layer.forward(ndarray::aview1(&x)).unwrap();
            for i in 0..3 {
                let mut acc = b[i];
                for j in 0..2 {
                    acc += w[[i, j]] * x[j];
                }
                assert!((got[i] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = DenseLayer::glorot(6, 4, &mut rng);
        let x = Array2::from_shape_simple_fn((5, 6), || rng.random_range(-1.0..1.0));
        let batch = layer.forward_batch(x.view()).unwrap();
        for (row, out) in x.rows().into_iter().zip(batch.rows()) {
            let single = layer.forward(row).unwrap();
            for (a, b) in single.iter().zip(out.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let layer = DenseLayer::zeros(3, 2);
        assert!(matches!(layer.forward(array![1.0, 2.0].view()), Err(Error::Shape { .. })));
        assert!(DenseLayer::new(Array2::zeros((2, 3)), Array1::zeros(3)).is_err());
        assert!(DenseLayer::new(array![[f64::NAN]], array![0.0]).is_err());
    }

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = DenseLayer::glorot(100, 50, &mut rng);
        let limit = (6.0f64 / 150.0).sqrt();
        assert!(layer.weights().iter().all(|w| w.abs() <= limit));
    }
}
