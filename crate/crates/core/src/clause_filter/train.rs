//! Supervised training of the clause filter with per-batch class balancing.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::{ClauseEmbeddingCache, EmbeddingProvider, ImageResolver, IMAGE_DIM, TEXT_DIM};
use super::{FilterModel, FILTER_DIMS};
use crate::error::{Error, Result};
use crate::nnlab::{AdamConfig, AdamState};
use crate::registry::ClauseRegistry;

/// One labeled image–clause pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterSample {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub clause_id: u32,
    pub label: u8,
}

impl FilterSample {
    pub fn new(image_ref: impl Into<String>, clause_id: u32, relevant: bool) -> FilterSample {
        FilterSample {
            image_ref: image_ref.into(),
            clause_id,
            label: relevant as u8,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// Reads a JSON-lines pairs file. Blank lines are skipped.
pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<FilterSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: FilterSample = crate::error::parse_json(&line).map_err(|e| at_line(e, i + 1))?;
        if sample.label > 1 {
            return Err(Error::Schema {
                path: "label".into(),
                line: i + 1,
                column: 0,
                message: format!("label must be 0 or 1, got {}", sample.label),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

fn at_line(err: Error, line: usize) -> Error {
    match err {
        Error::Schema {
            path,
            column,
            message,
            ..
        } => Error::Schema {
            path,
            line,
            column,
            message,
        },
        other => other,
    }
}

pub fn write_pairs(path: impl AsRef<Path>, samples: &[FilterSample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 10,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FilterModel,
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
}

/// Training state that can be advanced one epoch at a time.
pub struct FilterTrainer {
    model: FilterModel,
    adam: AdamState,
    rng: ChaCha8Rng,
    config: TrainConfig,
    images: Vec<Vec<f64>>,
    clauses: HashMap<u32, Arc<Vec<f64>>>,
    /// (image index, clause id) per sample.
    rows: Vec<(usize, u32)>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
    history: Vec<f64>,
    batch_positive_fractions: Vec<f64>,
}

impl std::fmt::Debug for FilterTrainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterTrainer")
            .field("config", &self.config)
            .field("samples", &self.rows.len())
            .field("epochs_run", &self.history.len())
            .finish()
    }
}

impl FilterTrainer {
    pub fn new(
        samples: &[FilterSample],
        registry: &ClauseRegistry,
        images: &dyn ImageResolver,
        text_provider: Arc<dyn EmbeddingProvider>,
        config: TrainConfig,
    ) -> Result<FilterTrainer> {
        if config.batch < 2 {
            return Err(Error::Validation("batch size must be at least 2 for balanced sampling".into()));
        }
        if !(config.lr > 0.0 && config.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", config.lr)));
        }
        let positives: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].is_positive()).collect();
        let negatives: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].is_positive()).collect();
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::Training(format!(
                "balanced sampling needs both labels: {} positive, {} negative samples",
                positives.len(),
                negatives.len()
            )));
        }

        let texts = ClauseEmbeddingCache::new(text_provider);
        let mut clauses = HashMap::new();
        let mut image_index: HashMap<&str, usize> = HashMap::new();
        let mut image_vecs = Vec::new();
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let clause = registry
                .get(s.clause_id)
                .ok_or_else(|| Error::Validation(format!("clause {} is not in the registry", s.clause_id)))?;
            if let Entry::Vacant(slot) = clauses.entry(s.clause_id) {
                let v = texts.get(clause)?;
                check_len("clause embedding", TEXT_DIM, &v)?;
                slot.insert(v);
            }
            let idx = match image_index.get(s.image_ref.as_str()) {
                Some(&i) => i,
                None => {
                    let v = images.resolve(&s.image_ref)?;
                    check_len("image embedding", IMAGE_DIM, &v)?;
                    image_vecs.push(v);
                    image_index.insert(&s.image_ref, image_vecs.len() - 1);
                    image_vecs.len() - 1
                }
            };
            rows.push((idx, s.clause_id));
        }

        let model = FilterModel::init(config.seed, registry.version());
        let adam = AdamState::new(
            &model.mlp().param_sizes(),
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(FilterTrainer {
            model,
            adam,
            rng,
            config,
            images: image_vecs,
            clauses,
            rows,
            positives,
            negatives,
            history: Vec::new(),
            batch_positive_fractions: Vec::new(),
        })
    }

    pub fn model(&self) -> &FilterModel {
        &self.model
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Positive fraction of each batch in the most recent epoch.
    pub fn batch_positive_fractions(&self) -> &[f64] {
        &self.batch_positive_fractions
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.rows.len().div_ceil(self.config.batch)
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            history: self.history,
        }
    }

    /// The sample indices of every batch in one epoch. Each batch holds
    /// `batch / 2` positives. The larger class is walked without replacement
    /// through a fresh permutation and the smaller one is drawn with replacement.
    fn plan_epoch(&mut self) -> Vec<Vec<usize>> {
        let batch = self.config.batch;
        let n_pos = batch / 2;
        let n_neg = batch - n_pos;
        let pos_major = self.positives.len() >= self.negatives.len();
        let mut perm_pos = self.positives.clone();
        let mut perm_neg = self.negatives.clone();
        if pos_major {
            perm_pos.shuffle(&mut self.rng);
        } else {
            perm_neg.shuffle(&mut self.rng);
        }
        let (mut cur_pos, mut cur_neg) = (0usize, 0usize);
        let mut plan = Vec::with_capacity(self.batches_per_epoch());
        for _ in 0..self.batches_per_epoch() {
            let mut idx = Vec::with_capacity(batch);
            for _ in 0..n_pos {
                idx.push(draw(&mut perm_pos, &mut cur_pos, pos_major, &mut self.rng));
            }
            for _ in 0..n_neg {
                idx.push(draw(&mut perm_neg, &mut cur_neg, !pos_major, &mut self.rng));
            }
            plan.push(idx);
        }
        plan
    }

    /// Runs one epoch and returns its mean batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let epoch = self.history.len() + 1;
        let plan = self.plan_epoch();
        let mut total = 0.0;
        self.batch_positive_fractions.clear();
        let mut x = Array2::<f64>::zeros((self.config.batch, FILTER_DIMS[0]));
        let mut labels = vec![0.0; self.config.batch];
        for (b, indices) in plan.iter().enumerate() {
            let mut positives = 0;
            for (row, &si) in indices.iter().enumerate() {
                let (img, clause_id) = self.rows[si];
                let is_pos = self.positives.binary_search(&si).is_ok();
                positives += is_pos as usize;
                labels[row] = if is_pos { 1.0 } else { 0.0 };
                let mut xr = x.row_mut(row);
                let xs = xr.as_slice_mut().expect("standard layout");
                xs[..IMAGE_DIM].copy_from_slice(&self.images[img]);
                xs[IMAGE_DIM..].copy_from_slice(&self.clauses[&clause_id]);
            }
            self.batch_positive_fractions
                .push(positives as f64 / indices.len() as f64);

            let (loss, grads) = self.model.mlp().bce_backward(x.view(), &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {b} (step {})",
                    self.adam.step_count() + 1
                )));
            }
            total += loss;
            let grad_slices: Vec<&[f64]> = grads
                .weights
                .iter()
                .zip(&grads.biases)
                .flat_map(|(w, bias)| {
                    [
                        w.as_slice().expect("standard layout"),
                        bias.as_slice().expect("standard layout"),
                    ]
                })
                .collect();
            let mut params = self.model.mlp_mut().param_slices_mut();
            self.adam.step(&mut params, &grad_slices)?;
        }
        let mean = total / plan.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!("non-finite mean loss at epoch {epoch}")));
        }
        self.history.push(mean);
        Ok(mean)
    }

    /// Accuracy at threshold 0.5, restricted to clauses seen during training.
    pub fn accuracy(&self, samples: &[FilterSample], images: &dyn ImageResolver) -> Result<f64> {
        accuracy_with(&self.model, samples, images, |id| {
            self.clauses
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("clause {id} was not part of training")))
        })
    }
}

fn draw(perm: &mut [usize], cursor: &mut usize, without_replacement: bool, rng: &mut ChaCha8Rng) -> usize {
    if without_replacement {
        if *cursor == perm.len() {
            perm.shuffle(rng);
            *cursor = 0;
        }
        *cursor += 1;
        perm[*cursor - 1]
    } else {
        perm[rng.random_range(0..perm.len())]
    }
}

fn check_len(what: &str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::shape(format!("{what} of dim {expected}"), v.len()));
    }
    Ok(())
}

/// Trains a fresh seeded model for `config.epochs` epochs.
pub fn train_filter(
    samples: &[FilterSample],
    registry: &ClauseRegistry,
    images: &dyn ImageResolver,
    text_provider: Arc<dyn EmbeddingProvider>,
    config: TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = FilterTrainer::new(samples, registry, images, text_provider, config)?;
    for _ in 0..config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_outcome())
}

/// Fraction of samples whose thresholded probability matches the label.
pub fn accuracy(
    model: &FilterModel,
    samples: &[FilterSample],
    registry: &ClauseRegistry,
    images: &dyn ImageResolver,
    text_provider: Arc<dyn EmbeddingProvider>,
) -> Result<f64> {
    let texts = ClauseEmbeddingCache::new(text_provider);
    accuracy_with(model, samples, images, |id| {
        let clause = registry
            .get(id)
            .ok_or_else(|| Error::Validation(format!("clause {id} is not in the registry")))?;
        texts.get(clause)
    })
}

fn accuracy_with(
    model: &FilterModel,
    samples: &[FilterSample],
    images: &dyn ImageResolver,
    clause_vec: impl Fn(u32) -> Result<Arc<Vec<f64>>>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("accuracy of an empty sample set".into()));
    }
    let mut image_proj = HashMap::new();
    let mut text_proj = HashMap::new();
    let mut correct = 0usize;
    for s in samples {
        if let Entry::Vacant(slot) = image_proj.entry(s.image_ref.clone()) {
            slot.insert(model.image_projection(&images.resolve(&s.image_ref)?)?);
        }
        if let Entry::Vacant(slot) = text_proj.entry(s.clause_id) {
            slot.insert(model.text_projection(&clause_vec(s.clause_id)?)?);
        }
        let p = model.head(&image_proj[&s.image_ref], &text_proj[&s.clause_id]);
        if (p >= 0.5) == s.is_positive() {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
