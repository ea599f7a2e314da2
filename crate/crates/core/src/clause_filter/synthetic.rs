//! Seeded image–clause pairs with a known answer, for exercising training.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FilterSample, PrecomputedImages, IMAGE_DIM};
use crate::error::{Error, Result};
use crate::registry::ClauseRegistry;

/// Two Gaussian clusters per clause in image-embedding space: images drawn
/// around the "relevant" center are labeled 1 for that clause, images around
/// the "irrelevant" center 0.
#[derive(Debug, Clone)]
pub struct SeparablePairs {
    pub clause_ids: Vec<u32>,
    /// `centers[c] = [irrelevant, relevant]` for clause `clause_ids[c]`.
    pub centers: Vec<[Vec<f64>; 2]>,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    seed: u64,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

impl SeparablePairs {
    /// Uses the first `clauses` registry entries. Centers have norm close to 1.
    pub fn new(registry: &ClauseRegistry, clauses: usize, noise: f64, seed: u64) -> Result<SeparablePairs> {
        if clauses == 0 || clauses > registry.len() {
            return Err(Error::Validation(format!(
                "cannot draw {clauses} clauses from a registry of {}",
                registry.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (IMAGE_DIM as f64).sqrt();
        let centers = (0..clauses)
            .map(|_| [gaussian(&mut rng, IMAGE_DIM, scale), gaussian(&mut rng, IMAGE_DIM, scale)])
            .collect();
        Ok(SeparablePairs {
            clause_ids: registry.ids().take(clauses).collect(),
            centers,
            noise,
            seed,
        })
    }

    /// `n` samples with labels split evenly at random. Image references are
    /// prefixed so several draws can share one resolver.
    pub fn draw(&self, n: usize, stream: u64, prefix: &str) -> (Vec<FilterSample>, PrecomputedImages) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let mut samples = Vec::with_capacity(n);
        let mut images = HashMap::with_capacity(n);
        for i in 0..n {
            let c = rng.random_range(0..self.clause_ids.len());
            let label = i % 2 == 0;
            let center = &self.centers[c][label as usize];
            let noise = gaussian(&mut rng, IMAGE_DIM, self.noise);
            let vec: Vec<f64> = center.iter().zip(noise).map(|(a, b)| a + b).collect();
            let image_ref = format!("{prefix}-{i:06}");
            samples.push(FilterSample::new(image_ref.clone(), self.clause_ids[c], label));
            images.insert(image_ref, vec);
        }
        (samples, PrecomputedImages(images))
    }

    /// Label of the nearer of the clause's two centers.
    pub fn nearest_center_label(&self, clause_id: u32, image: &[f64]) -> Option<bool> {
        let c = self.clause_ids.iter().position(|&id| id == clause_id)?;
        let dist = |center: &[f64]| -> f64 { center.iter().zip(image).map(|(a, b)| (a - b) * (a - b)).sum() };
        Some(dist(&self.centers[c][1]) < dist(&self.centers[c][0]))
    }
}
