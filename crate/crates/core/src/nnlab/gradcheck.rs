use crate::error::{Error, Result};

/// A differentiable scalar objective over a flat parameter vector.
///
/// Parameters are read and written one coordinate at a time so that large models
/// can be probed without copying the whole parameter set per evaluation.
pub trait Objective {
    fn num_params(&self) -> usize;
    fn get(&self, index: usize) -> f64;
    fn set(&mut self, index: usize, value: f64);
    fn loss(&self) -> f64;
    fn gradient(&self) -> Vec<f64>;
}

/// [`Objective`] backed by an owned vector and two closures.
pub struct FnObjective<L, G> {
    params: Vec<f64>,
    loss: L,
    grad: G,
}

impl<L, G> FnObjective<L, G>
where
    L: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    pub fn new(params: Vec<f64>, loss: L, grad: G) -> Self {
        FnObjective { params, loss, grad }
    }
}

impl<L, G> Objective for FnObjective<L, G>
where
    L: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn get(&self, index: usize) -> f64 {
        self.params[index]
    }

    fn set(&mut self, index: usize, value: f64) {
        self.params[index] = value;
    }

    fn loss(&self) -> f64 {
        (self.loss)(&self.params)
    }

    fn gradient(&self) -> Vec<f64> {
        (self.grad)(&self.params)
    }
}

/// Max over all parameters of `|analytic - central| / (|central| + 1e-8)`.
pub fn finite_diff_check<O: Objective>(objective: &mut O, h: f64) -> Result<f64> {
    let all: Vec<usize> = (0..objective.num_params()).collect();
    finite_diff_check_subset(objective, h, &all)
}

/// As [`finite_diff_check`], restricted to the given coordinates.
pub fn finite_diff_check_subset<O: Objective>(objective: &mut O, h: f64, indices: &[usize]) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Validation(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let base = objective.loss();
    if !base.is_finite() {
        return Err(Error::Validation(format!("objective is not finite at the probe point ({base})")));
    }
    let analytic = objective.gradient();
    if analytic.len() != objective.num_params() {
        return Err(Error::shape(objective.num_params(), analytic.len()));
    }
    let mut worst = 0.0f64;
    for &i in indices {
        let original = objective.get(i);
        objective.set(i, original + h);
        let plus = objective.loss();
        objective.set(i, original - h);
        let minus = objective.loss();
        objective.set(i, original);
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Validation(format!("objective not finite around parameter {i}")));
        }
        let central = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - central).abs() / (central.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
