//! Frozen encoder roles: image (2048-d) and clause text (768-d) embeddings.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{parse_json, Error, Result};
use crate::registry::ClauseRegistry;
use crate::remote::{png_base64, JsonClient};
use crate::types::Clause;

pub const IMAGE_DIM: usize = 2048;
pub const TEXT_DIM: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Text,
}

impl EmbeddingKind {
    pub fn dim(self) -> usize {
        match self {
            EmbeddingKind::Image => IMAGE_DIM,
            EmbeddingKind::Text => TEXT_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Payload<'a> {
    Image(&'a RgbImage),
    Text(&'a str),
}

impl Payload<'_> {
    pub fn kind(&self) -> EmbeddingKind {
        match self {
            Payload::Image(_) => EmbeddingKind::Image,
            Payload::Text(_) => EmbeddingKind::Text,
        }
    }
}

/// A frozen encoder. Output length always equals `kind().dim()` and identical
/// payloads always embed identically.
pub trait EmbeddingProvider: Send + Sync {
    fn kind(&self) -> EmbeddingKind;
    fn embed(&self, payload: Payload<'_>) -> Result<Vec<f64>>;
}

fn check_payload(kind: EmbeddingKind, payload: &Payload<'_>) -> Result<()> {
    if payload.kind() != kind {
        return Err(Error::Validation(format!(
            "{:?} provider cannot embed a {:?} payload",
            kind,
            payload.kind()
        )));
    }
    Ok(())
}

fn check_output(kind: EmbeddingKind, v: &[f64]) -> Result<()> {
    if v.len() != kind.dim() {
        return Err(Error::shape(format!("{:?} embedding of dim {}", kind, kind.dim()), v.len()));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::Validation("embedding contains non-finite values".into()));
    }
    Ok(())
}

/// Deterministic pseudo-embedding: the SHA-256 of the payload seeds a Gaussian
/// vector scaled to roughly unit norm. Stands in for the frozen encoders in tests
/// and offline runs.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    kind: EmbeddingKind,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(kind: EmbeddingKind, seed: u64) -> HashEmbedder {
        HashEmbedder { kind, seed }
    }

    pub fn image() -> HashEmbedder {
        HashEmbedder::new(EmbeddingKind::Image, 0)
    }

    pub fn text() -> HashEmbedder {
        HashEmbedder::new(EmbeddingKind::Text, 0)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    fn embed(&self, payload: Payload<'_>) -> Result<Vec<f64>> {
        check_payload(self.kind, &payload)?;
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        match payload {
            Payload::Image(img) => {
                hasher.update(img.width().to_le_bytes());
                hasher.update(img.height().to_le_bytes());
                hasher.update(img.as_raw());
            }
            Payload::Text(text) => hasher.update(text.as_bytes()),
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let dim = self.kind.dim();
        let scale = 1.0 / (dim as f64).sqrt();
        Ok((0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect())
    }
}

#[derive(Serialize)]
#[serde(rename_all = "lowercase")]
enum EmbedRequest<'a> {
    Image(String),
    Text(&'a str),
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

/// Remote encoder service: `POST {"image": <base64 PNG>}` or `POST {"text": str}`
/// answering `{"embedding": [..]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    kind: EmbeddingKind,
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(kind: EmbeddingKind, url: impl Into<String>, timeout: Duration) -> HttpEmbedder {
        HttpEmbedder {
            kind,
            client: JsonClient::new(url, timeout),
        }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    fn embed(&self, payload: Payload<'_>) -> Result<Vec<f64>> {
        check_payload(self.kind, &payload)?;
        let request = match payload {
            Payload::Image(img) => EmbedRequest::Image(png_base64(img)?),
            Payload::Text(text) => EmbedRequest::Text(text),
        };
        let response: EmbedResponse = self.client.post(&request)?;
        check_output(self.kind, &response.embedding)?;
        Ok(response.embedding)
    }
}

/// Persisted clause text embeddings for one registry version:
/// `{"registry_version": str, "dim": 768, "vectors": {id: [..]}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseEmbeddings {
    pub registry_version: String,
    pub dim: usize,
    pub vectors: BTreeMap<u32, Vec<f64>>,
}

impl ClauseEmbeddings {
    pub fn compute(registry: &ClauseRegistry, provider: &dyn EmbeddingProvider) -> Result<ClauseEmbeddings> {
        if provider.kind() != EmbeddingKind::Text {
            return Err(Error::Validation("clause embeddings need a text provider".into()));
        }
        let mut vectors = BTreeMap::new();
        for clause in registry.clauses() {
            let v = embed_clause(provider, clause)?;
            vectors.insert(clause.id, v);
        }
        Ok(ClauseEmbeddings {
            registry_version: registry.version().to_string(),
            dim: TEXT_DIM,
            vectors,
        })
    }

    pub fn get(&self, id: u32) -> Option<&[f64]> {
        self.vectors.get(&id).map(Vec::as_slice)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ClauseEmbeddings> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: ClauseEmbeddings = parse_json(&text)?;
        if parsed.dim != TEXT_DIM {
            return Err(Error::shape(TEXT_DIM, parsed.dim));
        }
        for (id, v) in &parsed.vectors {
            if v.len() != parsed.dim {
                return Err(Error::shape(format!("clause {id} vector of dim {}", parsed.dim), v.len()));
            }
        }
        Ok(parsed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Conventional cache location next to a weight file: `<weights>.clauses.json`.
    pub fn sidecar_path(weights: &Path) -> PathBuf {
        let mut name = weights.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".clauses.json");
        weights.with_file_name(name)
    }
}

fn embed_clause(provider: &dyn EmbeddingProvider, clause: &Clause) -> Result<Vec<f64>> {
    let v = provider
        .embed(Payload::Text(&clause.text))
        .map_err(|e| Error::Provider {
            subject: format!("clause {}", clause.id),
            message: e.to_string(),
        })?;
    check_output(EmbeddingKind::Text, &v).map_err(|e| Error::Provider {
        subject: format!("clause {}", clause.id),
        message: e.to_string(),
    })?;
    Ok(v)
}

/// Cache key: clause id plus the exact text that was embedded.
pub(crate) type ClauseKey = (u32, String);

/// Lazily filled clause-text embedding cache keyed by `(id, text)`.
pub struct ClauseEmbeddingCache {
    provider: Arc<dyn EmbeddingProvider>,
    vectors: RwLock<HashMap<ClauseKey, Arc<Vec<f64>>>>,
}

impl ClauseEmbeddingCache {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> ClauseEmbeddingCache {
        ClauseEmbeddingCache {
            provider,
            vectors: RwLock::new(HashMap::new()),
        }
    }

    /// Seeds the cache from a persisted file for `registry`. Entries whose registry
    /// version differs are ignored.
    pub fn preload(&self, registry: &ClauseRegistry, stored: &ClauseEmbeddings) -> usize {
        if stored.registry_version != registry.version() {
            return 0;
        }
        let mut map = self.vectors.write().expect("cache lock");
        let mut n = 0;
        for clause in registry.clauses() {
            if let Some(v) = stored.vectors.get(&clause.id) {
                map.insert((clause.id, clause.text.clone()), Arc::new(v.clone()));
                n += 1;
            }
        }
        n
    }

    pub fn get(&self, clause: &Clause) -> Result<Arc<Vec<f64>>> {
        let key = (clause.id, clause.text.clone());
        if let Some(v) = self.vectors.read().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(embed_clause(self.provider.as_ref(), clause)?);
        self.vectors
            .write()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| v.clone());
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.vectors.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolves a training/evaluation image reference to its embedding.
pub trait ImageResolver: Sync {
    fn resolve(&self, image_ref: &str) -> Result<Vec<f64>>;
}

/// Embeddings known up front, keyed by image reference.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedImages(pub HashMap<String, Vec<f64>>);

impl ImageResolver for PrecomputedImages {
    fn resolve(&self, image_ref: &str) -> Result<Vec<f64>> {
        self.0.get(image_ref).cloned().ok_or_else(|| Error::Provider {
            subject: format!("image {image_ref}"),
            message: "no precomputed embedding".into(),
        })
    }
}

/// Loads image files relative to `root` and embeds them.
pub struct ImageFiles {
    pub root: PathBuf,
    pub provider: Arc<dyn EmbeddingProvider>,
}

impl ImageResolver for ImageFiles {
    fn resolve(&self, image_ref: &str) -> Result<Vec<f64>> {
        let path = self.root.join(image_ref);
        let img = image::open(&path)
            .map_err(|e| Error::Provider {
                subject: format!("image {image_ref}"),
                message: e.to_string(),
            })?
            .to_rgb8();
        let v = self.provider.embed(Payload::Image(&img))?;
        check_output(EmbeddingKind::Image, &v)?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn hash_embedder_is_deterministic_with_declared_dims() {
        let text = HashEmbedder::text();
        let a = text.embed(Payload::Text("Smoking")).unwrap();
        let b = text.embed(Payload::Text("Smoking")).unwrap();
        let c = text.embed(Payload::Text("Smoking.")).unwrap();
        assert_eq!(a.len(), TEXT_DIM);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 0.15, "{norm}");

        let image = HashEmbedder::image();
        let img = RgbImage::new(4, 4);
        assert_eq!(image.embed(Payload::Image(&img)).unwrap().len(), IMAGE_DIM);
        assert!(image.embed(Payload::Text("x")).is_err());
    }

    struct Counting {
        inner: HashEmbedder,
        calls: AtomicUsize,
        fail_on: Option<&'static str>,
    }

    impl EmbeddingProvider for Counting {
        fn kind(&self) -> EmbeddingKind {
            EmbeddingKind::Text
        }
        fn embed(&self, payload: Payload<'_>) -> Result<Vec<f64>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if let (Some(bad), Payload::Text(t)) = (self.fail_on, payload) {
                if t == bad {
                    return Err(Error::Validation("encoder down".into()));
                }
            }
            self.inner.embed(payload)
        }
    }

    #[test]
    fn cache_embeds_each_clause_once() {
        let provider = Arc::new(Counting {
            inner: HashEmbedder::text(),
            calls: AtomicUsize::new(0),
            fail_on: None,
        });
        let cache = ClauseEmbeddingCache::new(provider.clone());
        let reg = ClauseRegistry::bundled();
        for _ in 0..3 {
            for c in reg.clauses() {
                cache.get(c).unwrap();
            }
        }
        assert_eq!(provider.calls.load(Ordering::SeqCst), 40);
        assert_eq!(cache.len(), 40);
    }

    #[test]
    fn provider_failure_names_clause() {
        let provider = Arc::new(Counting {
            inner: HashEmbedder::text(),
            calls: AtomicUsize::new(0),
            fail_on: Some("Smoking"),
        });
        let cache = ClauseEmbeddingCache::new(provider);
        let reg = ClauseRegistry::bundled();
        let err = cache.get(reg.get(24).unwrap()).unwrap_err();
        assert!(err.to_string().contains("clause 24"), "{err}");
    }

    #[test]
    fn persisted_cache_round_trip_and_preload() {
        let reg = ClauseRegistry::bundled();
        let stored = ClauseEmbeddings::compute(&reg, &HashEmbedder::text()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = ClauseEmbeddings::sidecar_path(&dir.path().join("w.json"));
        assert!(path.ends_with("w.json.clauses.json"));
        stored.save(&path).unwrap();
        let back = ClauseEmbeddings::load(&path).unwrap();
        assert_eq!(back, stored);

        let provider = Arc::new(Counting {
            inner: HashEmbedder::text(),
            calls: AtomicUsize::new(0),
            fail_on: None,
        });
        let cache = ClauseEmbeddingCache::new(provider.clone());
        assert_eq!(cache.preload(&reg, &back), 40);
        for c in reg.clauses() {
            assert_eq!(cache.get(c).unwrap().as_slice(), back.get(c.id).unwrap());
        }
        assert_eq!(provider.calls.load(Ordering::SeqCst), 0);
        let other = ClauseRegistry::synthetic(3).unwrap();
        assert_eq!(cache.preload(&other, &back), 0);
    }
}
