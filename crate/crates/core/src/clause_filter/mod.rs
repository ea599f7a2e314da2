//! Clause filter: scores image–clause relevance with a small MLP over
//! concatenated frozen embeddings and keeps the Top-K clauses per scene.
//!
//! Input layout is `[image (2048) | clause text (768)]`. The first layer is
//! evaluated in two halves, `W_img · image + b` once per frame and `W_txt · text`
//! once per clause (cached), which is what makes scoring hundreds of clauses per
//! frame cheap. [`score_clause`] and [`ClauseFilter::score_all`] share that exact
//! arithmetic, so batched and per-pair scores are bit-identical.

mod embed;
mod synthetic;
mod train;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::{Arc, RwLock};

use ndarray::{s, Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use embed::{
    ClauseEmbeddingCache, ClauseEmbeddings, EmbeddingKind, EmbeddingProvider, HashEmbedder, HttpEmbedder,
    ImageFiles, ImageResolver, Payload, PrecomputedImages, IMAGE_DIM, TEXT_DIM,
};
pub use synthetic::SeparablePairs;
use embed::ClauseKey;
pub use train::{
    accuracy, read_pairs, train_filter, write_pairs, FilterSample, FilterTrainer, TrainConfig, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::nnlab::{relu, sigmoid, Mlp, WeightFile};
use crate::registry::ClauseRegistry;
use crate::types::{Clause, FrameTriplet};

/// Layer widths of the filter network.
pub const FILTER_DIMS: [usize; 5] = [IMAGE_DIM + TEXT_DIM, 1024, 512, 256, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMetadata {
    pub registry_version: String,
    pub seed: u64,
    /// Wall-clock training time. Not written to weight files so that seeded runs
    /// produce identical files.
    #[serde(skip)]
    pub trained_at: Option<String>,
}

/// The relevance network plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterModel {
    mlp: Mlp,
    pub metadata: FilterMetadata,
}

impl FilterModel {
    pub fn new(mlp: Mlp, metadata: FilterMetadata) -> Result<FilterModel> {
        if mlp.dims() != FILTER_DIMS {
            return Err(Error::shape(format!("{FILTER_DIMS:?}"), format!("{:?}", mlp.dims())));
        }
        Ok(FilterModel { mlp, metadata })
    }

    /// Seeded Glorot initialization.
    pub fn init(seed: u64, registry_version: impl Into<String>) -> FilterModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::glorot(&FILTER_DIMS, &mut rng).expect("static dims");
        FilterModel {
            mlp,
            metadata: FilterMetadata {
                registry_version: registry_version.into(),
                seed,
                trained_at: None,
            },
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub(crate) fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut file = self.mlp.to_weight_file();
        file.meta = serde_json::to_value(&self.metadata).ok();
        file
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<FilterModel> {
        if file.dims != FILTER_DIMS {
            return Err(Error::shape(format!("dims {FILTER_DIMS:?}"), format!("{:?}", file.dims)));
        }
        let mlp = Mlp::from_weight_file(file)?;
        let metadata = file
            .meta
            .clone()
            .and_then(|m| serde_json::from_value(m).ok())
            .unwrap_or(FilterMetadata {
                registry_version: String::new(),
                seed: 0,
                trained_at: None,
            });
        FilterModel::new(mlp, metadata)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FilterModel> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        FilterModel::from_weight_file(&WeightFile::read_from(BufReader::new(file))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        self.to_weight_file().write_to(&mut writer)?;
        std::io::Write::flush(&mut writer).map_err(|e| Error::io(path, e))
    }

    /// `W_img · image + b` of the first layer.
    pub fn image_projection(&self, image_vec: &[f64]) -> Result<Array1<f64>> {
        check_dim("image embedding", IMAGE_DIM, image_vec)?;
        let first = &self.mlp.layers()[0];
        let w = first.weights().slice(s![.., ..IMAGE_DIM]);
        Ok(w.dot(&ArrayView1::from(image_vec)) + first.bias())
    }

    /// `W_txt · text` of the first layer.
    pub fn text_projection(&self, clause_vec: &[f64]) -> Result<Array1<f64>> {
        check_dim("clause embedding", TEXT_DIM, clause_vec)?;
        let w = self.mlp.layers()[0].weights().slice(s![.., IMAGE_DIM..]);
        Ok(w.dot(&ArrayView1::from(clause_vec)))
    }

    /// Relevance probability from the two first-layer halves.
    pub fn head(&self, image_proj: &Array1<f64>, text_proj: &Array1<f64>) -> f64 {
        let mut h = image_proj + text_proj;
        for layer in &self.mlp.layers()[1..] {
            h.mapv_inplace(relu);
            h = layer.weights().dot(&h) + layer.bias();
        }
        sigmoid(h[0])
    }
}

fn check_dim(what: &str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::shape(format!("{what} of dim {expected}"), v.len()));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::Validation(format!("{what} contains non-finite values")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClauseScore {
    pub clause_id: u32,
    pub probability: f64,
}

/// `sigmoid(mlp([image | clause]))`.
pub fn score_clause(model: &FilterModel, image_vec: &[f64], clause_vec: &[f64]) -> Result<f64> {
    let img = model.image_projection(image_vec)?;
    let txt = model.text_projection(clause_vec)?;
    Ok(model.head(&img, &txt))
}

/// The `k` most probable clause ids, best first. Ties go to the smaller id.
pub fn top_k(scores: &[ClauseScore], k: usize) -> Result<Vec<u32>> {
    if scores.is_empty() {
        return Err(Error::Validation("cannot select from an empty score list".into()));
    }
    if k == 0 {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    let mut ranked: Vec<&ClauseScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then(a.clause_id.cmp(&b.clause_id))
    });
    Ok(ranked.into_iter().take(k).map(|s| s.clause_id).collect())
}

/// Scores every registry clause against one image embedding.
pub fn score_all(
    model: &FilterModel,
    image_vec: &[f64],
    registry: &ClauseRegistry,
    text_provider: Arc<dyn EmbeddingProvider>,
) -> Result<Vec<ClauseScore>> {
    ClauseFilter::new(Arc::new(model.clone()), text_provider).score_all(image_vec, registry)
}

/// A trained model bound to a clause-text cache, ready for repeated scoring.
pub struct ClauseFilter {
    model: Arc<FilterModel>,
    texts: ClauseEmbeddingCache,
    projections: RwLock<HashMap<ClauseKey, Arc<Array1<f64>>>>,
}

impl ClauseFilter {
    pub fn new(model: Arc<FilterModel>, text_provider: Arc<dyn EmbeddingProvider>) -> ClauseFilter {
        ClauseFilter {
            model,
            texts: ClauseEmbeddingCache::new(text_provider),
            projections: RwLock::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &FilterModel {
        &self.model
    }

    pub fn text_cache(&self) -> &ClauseEmbeddingCache {
        &self.texts
    }

    fn projection(&self, clause: &Clause) -> Result<Arc<Array1<f64>>> {
        let key = (clause.id, clause.text.clone());
        if let Some(p) = self.projections.read().expect("projection lock").get(&key) {
            return Ok(p.clone());
        }
        let vec = self.texts.get(clause)?;
        let p = Arc::new(self.model.text_projection(&vec)?);
        self.projections
            .write()
            .expect("projection lock")
            .entry(key)
            .or_insert_with(|| p.clone());
        Ok(p)
    }

    /// One score per clause, in registry order.
    pub fn score_all(&self, image_vec: &[f64], registry: &ClauseRegistry) -> Result<Vec<ClauseScore>> {
        let img = self.model.image_projection(image_vec)?;
        registry
            .clauses()
            .par_iter()
            .map(|clause| {
                let txt = self.projection(clause)?;
                Ok(ClauseScore {
                    clause_id: clause.id,
                    probability: self.model.head(&img, &txt),
                })
            })
            .collect()
    }

    /// Per-clause maximum over the three frames of a triplet.
    pub fn score_triplet(
        &self,
        triplet: &FrameTriplet,
        registry: &ClauseRegistry,
        image_provider: &dyn EmbeddingProvider,
    ) -> Result<Vec<ClauseScore>> {
        let mut best: Option<Vec<ClauseScore>> = None;
        for frame in triplet.frames() {
            let vec = image_provider
                .embed(Payload::Image(&frame.image))
                .map_err(|e| Error::Provider {
                    subject: format!("frame {}", frame.index),
                    message: e.to_string(),
                })?;
            let scores = self.score_all(&vec, registry)?;
            best = Some(match best {
                None => scores,
                Some(prev) => prev
                    .into_iter()
                    .zip(scores)
                    .map(|(a, b)| ClauseScore {
                        clause_id: a.clause_id,
                        probability: a.probability.max(b.probability),
                    })
                    .collect(),
            });
        }
        Ok(best.expect("triplet has three frames"))
    }
}
