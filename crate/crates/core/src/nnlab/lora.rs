use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Low-rank adapted linear map `h = W0 x + (alpha / r) B A x`.
///
/// `W0` (`d × k`) is frozen; only `A` (`r × k`) and `B` (`d × r`) are trainable.
/// There is no bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    base: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    alpha: f64,
}

/// Gradients of a scalar loss with respect to the trainable factors.
#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub x: Array1<f64>,
}

impl LoraLinear {
    pub fn new(base: Array2<f64>, a: Array2<f64>, b: Array2<f64>, alpha: f64) -> Result<LoraLinear> {
        let (d, k) = base.dim();
        let r = a.nrows();
        if d == 0 || k == 0 {
            return Err(Error::shape("non-empty base weights", format!("{d}x{k}")));
        }
        if r == 0 || r > d.min(k) {
            return Err(Error::Validation(format!("rank {r} must be in 1..={}", d.min(k))));
        }
        if a.ncols() != k {
            return Err(Error::shape(format!("A of shape {r}x{k}"), format!("{:?}", a.dim())));
        }
        if b.dim() != (d, r) {
            return Err(Error::shape(format!("B of shape {d}x{r}"), format!("{:?}", b.dim())));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Validation(format!("alpha must be positive, got {alpha}")));
        }
        Ok(LoraLinear { base, a, b, alpha })
    }

    /// Standard initialization: `A` Gaussian with std `1/sqrt(k)`, `B = 0`, so the
    /// adapted map starts out equal to the base map.
    pub fn init<R: Rng + ?Sized>(base: Array2<f64>, rank: usize, alpha: f64, rng: &mut R) -> Result<LoraLinear> {
        let (d, k) = base.dim();
        let std = 1.0 / (k.max(1) as f64).sqrt();
        let a = Array2::from_shape_simple_fn((rank, k), || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        LoraLinear::new(base, a, Array2::zeros((d, rank)), alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn base(&self) -> &Array2<f64> {
        &self.base
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Array2<f64> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Array2<f64> {
        &mut self.b
    }

    /// Names of parameters that receive updates during adaptation.
    pub fn trainable_parameters(&self) -> [&'static str; 2] {
        ["lora_a", "lora_b"]
    }

    pub fn frozen_parameters(&self) -> [&'static str; 1] {
        ["base"]
    }

    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Materialized update `(alpha / r) B A`, shape `d × k`.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale()
    }

    /// Factored forward pass; `ΔW` is never formed.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.base.ncols() {
            return Err(Error::shape(format!("input of length {}", self.base.ncols()), x.len()));
        }
        let down = self.a.dot(&x);
        let up = self.b.dot(&down);
        Ok(self.base.dot(&x) + up * self.scale())
    }

    /// Backward pass for upstream gradient `grad_out = dL/dh`.
    pub fn backward(&self, x: ArrayView1<f64>, grad_out: ArrayView1<f64>) -> Result<LoraGrads> {
        let (d, k) = self.base.dim();
        if x.len() != k || grad_out.len() != d {
            return Err(Error::shape(format!("x of {k}, grad of {d}"), format!("{}, {}", x.len(), grad_out.len())));
        }
        let s = self.scale();
        let down = self.a.dot(&x);
        let bt_g = self.b.t().dot(&grad_out);
        let outer = |u: ArrayView1<f64>, v: ArrayView1<f64>| {
            Array2::from_shape_fn((u.len(), v.len()), |(i, j)| u[i] * v[j])
        };
        let grad_b = outer(grad_out, down.view()) * s;
        let grad_a = outer(bt_g.view(), x) * s;
        let grad_x = self.base.t().dot(&grad_out) + self.a.t().dot(&bt_g) * s;
        Ok(LoraGrads {
            a: grad_a,
            b: grad_b,
            x: grad_x,
        })
    }
}
