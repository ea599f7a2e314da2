use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` on a clamped probability.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Sum over positions of `-log softmax(row)[target]`, with the same clamp as
/// [`bce_loss`] applied in log space.
pub fn autoregressive_ce(logit_rows: ArrayView2<f64>, targets: &[usize]) -> Result<f64> {
    let (steps, vocab) = logit_rows.dim();
    if steps == 0 {
        return Err(Error::shape("at least one position", 0));
    }
    if targets.len() != steps {
        return Err(Error::shape(format!("{steps} targets"), targets.len()));
    }
    let lo = PROB_EPS.ln();
    let hi = (1.0 - PROB_EPS).ln();
    let mut total = 0.0;
    for (row, &target) in logit_rows.rows().into_iter().zip(targets) {
        if target >= vocab {
            return Err(Error::shape(format!("target index < {vocab}"), target));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        let log_p = (row[target] - log_norm).clamp(lo, hi);
        total -= log_p;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let near = bce_loss(1.0 - PROB_EPS, 1.0);
        assert!(near > 0.0 && (near - PROB_EPS).abs() < 1e-12);
        // -ln(0.2)
        assert!((bce_loss(0.8, 0.0) - 1.609_437_912_434_100_3).abs() < 1e-12);
        assert!(bce_loss(1.0, 0.0).is_finite());
    }

    #[test]
    fn ce_uniform_and_peaked() {
        let uniform = Array2::<f64>::zeros((3, 4));
        let loss = autoregressive_ce(uniform.view(), &[0, 3, 2]).unwrap();
        assert!((loss - 3.0 * 4f64.ln()).abs() < 1e-12);

        let mut peaked = Array2::from_elem((2, 5), -30.0);
        peaked[[0, 1]] = 30.0;
        peaked[[1, 4]] = 30.0;
        let loss = autoregressive_ce(peaked.view(), &[1, 4]).unwrap();
        assert!(loss > 0.0 && loss < 1e-6);
    }

    #[test]
    fn ce_matches_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let logits = Array2::from_shape_simple_fn((2, 5), || rng.random_range(-3.0f64..3.0));
            let targets = [rng.random_range(0..5), rng.random_range(0..5)];
            let mut oracle = 0.0;
            for (t, row) in logits.rows().into_iter().enumerate() {
                let denom: f64 = row.iter().map(|z| z.exp()).sum();
                oracle -= (row[targets[t]].exp() / denom).ln();
            }
            let got = autoregressive_ce(logits.view(), &targets).unwrap();
            assert!((got - oracle).abs() <= 1e-10);
        }
    }

    #[test]
    fn ce_errors() {
        let logits = Array2::<f64>::zeros((2, 3));
        assert!(autoregressive_ce(logits.view(), &[0, 3]).is_err());
        assert!(autoregressive_ce(logits.view(), &[0]).is_err());
        assert!(autoregressive_ce(Array2::<f64>::zeros((0, 3)).view(), &[]).is_err());
    }

    proptest! {
        #[test]
        fn bce_nonnegative_and_monotone(p in 0.0f64..=1.0, d in 1e-4f64..0.5) {
            prop_assert!(bce_loss(p, 1.0) >= 0.0);
            prop_assert!(bce_loss(p, 0.0) >= 0.0);
            let q = p + d;
            let lo = PROB_EPS;
            let hi = 1.0 - PROB_EPS;
            if p >= lo && q <= hi {
                prop_assert!(bce_loss(q, 1.0) < bce_loss(p, 1.0));
                prop_assert!(bce_loss(q, 0.0) > bce_loss(p, 0.0));
            }
        }

        #[test]
        fn ce_shift_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            shift in -50.0f64..50.0,
            row in 0usize..3,
        ) {
            let logits = Array2::from_shape_vec((3, 4), vals).unwrap();
            let targets = [0, 1, 3];
            let base = autoregressive_ce(logits.view(), &targets).unwrap();
            let mut shifted = logits.clone();
            shifted.row_mut(row).mapv_inplace(|z| z + shift);
            let moved = autoregressive_ce(shifted.view(), &targets).unwrap();
            prop_assert!((base - moved).abs() <= 1e-9);
        }
    }
}
