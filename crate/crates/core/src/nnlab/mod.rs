//! Small float64 neural-math kernel: dense layers, activations, losses, Adam,
//! the LoRA linear map and a central-difference gradient checker.
//!
//! Everything here is deliberately tiny and explicit so that every gradient can be
//! verified numerically. There is no autodiff graph; the one network that needs
//! training (the clause filter MLP) has a hand-written backward pass in [`mlp`].

mod adam;
mod dense;
mod gradcheck;
mod lora;
mod loss;
pub mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use dense::DenseLayer;
pub use gradcheck::{finite_diff_check, finite_diff_check_subset, FnObjective, Objective};
pub use lora::{LoraGrads, LoraLinear};
pub use loss::{autoregressive_ce, bce_loss, PROB_EPS};
pub use mlp::{Mlp, MlpGrads, MlpObjective, WeightFile, WEIGHT_FORMAT};

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(2.5), 2.5);
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(800.0) > 0.99);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
    }

    proptest! {
        #[test]
        fn sigmoid_symmetry(z in -40.0f64..40.0) {
            prop_assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn sigmoid_monotone(a in -30.0f64..30.0, d in 1e-3f64..5.0) {
            prop_assert!(sigmoid(a + d) > sigmoid(a));
        }
    }
}
