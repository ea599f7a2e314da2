//! Online inference: sample a video, magnify workers, filter clauses, query
//! the VLM per triplet and assemble a timestamped report.

mod job;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use job::{run_job, Job, JobError, JobRunner, JobState, JobStore, Progress};

use crate::clause_filter::{
    top_k, ClauseEmbeddings, ClauseFilter, EmbeddingKind, EmbeddingProvider, FilterModel, HashEmbedder, HttpEmbedder,
};
use crate::dataset::{format_annotation, make_triplets, sample_frames};
use crate::error::{Error, Result, Stage};
use crate::magnifier::{apply_magnifier, detect_checked, Bicubic, DetectorClient, Enhancer, FixtureDetector, HttpDetector, HttpEnhancer, MagnifyConfig};
use crate::registry::ClauseRegistry;
use crate::types::{Detection, FrameTriplet, ReportEntry, ReportStats, ViolationReport};
use crate::video::{open_video, FrameSource};
use crate::vlm::{analyze_triplet, with_retry, AnalysisResult, ChatBackend, ChatParams, CostModel, HttpChatBackend, MockBackend};

/// Where a backend lives: an HTTP endpoint or a local stub.
#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Url(url::Url),
    /// `stub:<path>`; the path may be empty for stubs that need no data.
    Stub(PathBuf),
}

impl Endpoint {
    pub fn parse(raw: &str) -> Result<Endpoint> {
        if let Some(rest) = raw.strip_prefix("stub:") {
            return Ok(Endpoint::Stub(PathBuf::from(rest)));
        }
        let url = url::Url::parse(raw).map_err(|e| Error::Validation(format!("endpoint {raw:?}: {e}")))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(Error::Validation(format!("endpoint {raw:?} must use http or https")));
        }
        Ok(Endpoint::Url(url))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    /// Required: chat endpoint or `stub:<mock script>`.
    pub vlm: Option<String>,
    pub vlm_model: String,
    /// `stub:<detections.jsonl>` or a URL. Without a detector no magnification
    /// or annotation happens.
    pub detector: Option<String>,
    /// URL of a super-resolution service; bicubic when unset.
    pub enhancer: Option<String>,
    /// URLs of embedding services; seeded hash embeddings when unset.
    pub image_embedder: Option<String>,
    pub text_embedder: Option<String>,
    /// Latency model reported by the mock VLM.
    pub mock_cost: CostModel,
    pub auth_token: Option<String>,
    pub timeout_s: f64,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            vlm: None,
            vlm_model: "monitorvlm".into(),
            detector: None,
            enhancer: None,
            image_embedder: None,
            text_embedder: None,
            mock_cost: CostModel::default(),
            auth_token: None,
            timeout_s: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub target_fps: f64,
    pub stride: usize,
    pub top_k: usize,
    pub magnify: MagnifyConfig,
    pub backends: BackendsConfig,
    pub max_concurrency: usize,
    pub filter_weights: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    /// Score clauses on magnified rather than raw frames.
    pub cf_uses_magnified: bool,
    /// Append detections to the user prompt.
    pub annotate_prompts: bool,
    /// Classes requested from the detector.
    pub detect_vocabulary: Vec<String>,
    pub chat: ChatParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_fps: 1.0,
            stride: 1,
            top_k: 5,
            magnify: MagnifyConfig::default(),
            backends: BackendsConfig::default(),
            max_concurrency: 4,
            filter_weights: None,
            registry: None,
            cf_uses_magnified: false,
            annotate_prompts: true,
            detect_vocabulary: ["worker", "helmet", "mobile phone", "cigarette", "ladder", "vehicle"]
                .into_iter()
                .map(String::from)
                .collect(),
            chat: ChatParams::default(),
        }
    }
}

impl PipelineConfig {
    /// Full check before running: [`Self::validate_values`] plus a configured VLM.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        if self.backends.vlm.is_none() {
            return Err(Error::Validation("no vlm backend configured".into()));
        }
        Ok(())
    }

    /// Checks numeric settings and endpoint syntax; backends may be left unset.
    pub fn validate_values(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Validation("top_k must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Validation("stride must be at least 1".into()));
        }
        if self.max_concurrency == 0 {
            return Err(Error::Validation("max_concurrency must be at least 1".into()));
        }
        if !(self.target_fps > 0.0 && self.target_fps.is_finite()) {
            return Err(Error::Validation(format!("target_fps must be positive, got {}", self.target_fps)));
        }
        self.magnify.validate()?;
        let b = &self.backends;
        for raw in [&b.vlm, &b.detector, &b.enhancer, &b.image_embedder, &b.text_embedder]
            .into_iter()
            .flatten()
        {
            Endpoint::parse(raw)?;
        }
        Ok(())
    }

    pub fn load_registry(&self) -> Result<ClauseRegistry> {
        match &self.registry {
            Some(path) => ClauseRegistry::load(path),
            None => Ok(ClauseRegistry::bundled()),
        }
    }
}

/// Live backend handles.
#[derive(Clone)]
pub struct Backends {
    pub vlm: Arc<dyn ChatBackend>,
    pub detector: Option<Arc<dyn DetectorClient>>,
    pub enhancer: Arc<dyn Enhancer>,
    pub image_embedder: Arc<dyn EmbeddingProvider>,
    pub text_embedder: Arc<dyn EmbeddingProvider>,
}

impl Backends {
    /// Hash embedders, bicubic enhancement, no detector.
    pub fn with_vlm(vlm: Arc<dyn ChatBackend>) -> Backends {
        Backends {
            vlm,
            detector: None,
            enhancer: Arc::new(Bicubic),
            image_embedder: Arc::new(HashEmbedder::image()),
            text_embedder: Arc::new(HashEmbedder::text()),
        }
    }

    pub fn from_config(cfg: &BackendsConfig) -> Result<Backends> {
        Ok(Backends {
            vlm: cfg.build_vlm()?,
            detector: cfg.build_detector()?,
            enhancer: cfg.build_enhancer()?,
            image_embedder: cfg.build_embedder(EmbeddingKind::Image)?,
            text_embedder: cfg.build_embedder(EmbeddingKind::Text)?,
        })
    }
}

impl BackendsConfig {
    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s.max(0.001))
    }

    pub fn build_vlm(&self) -> Result<Arc<dyn ChatBackend>> {
        Ok(match self.vlm.as_deref().map(Endpoint::parse).transpose()? {
            None => return Err(Error::Validation("no vlm backend configured".into())),
            Some(Endpoint::Stub(path)) => Arc::new(MockBackend::load(path)?.with_cost(self.mock_cost)),
            Some(Endpoint::Url(url)) => Arc::new(
                HttpChatBackend::new(url.as_str(), self.vlm_model.clone(), self.timeout())
                    .with_bearer(self.auth_token.clone()),
            ),
        })
    }

    pub fn build_detector(&self) -> Result<Option<Arc<dyn DetectorClient>>> {
        Ok(match self.detector.as_deref().map(Endpoint::parse).transpose()? {
            None => None,
            Some(Endpoint::Stub(path)) => Some(Arc::new(FixtureDetector::load(path)?)),
            Some(Endpoint::Url(url)) => Some(Arc::new(
                HttpDetector::new(url.as_str(), self.timeout()).with_bearer(self.auth_token.clone()),
            )),
        })
    }

    pub fn build_enhancer(&self) -> Result<Arc<dyn Enhancer>> {
        Ok(match self.enhancer.as_deref().map(Endpoint::parse).transpose()? {
            None | Some(Endpoint::Stub(_)) => Arc::new(Bicubic),
            Some(Endpoint::Url(url)) => {
                Arc::new(HttpEnhancer::new(url.as_str(), self.timeout()).with_bearer(self.auth_token.clone()))
            }
        })
    }

    /// Seeded hash embeddings unless a URL is configured for `kind`.
    pub fn build_embedder(&self, kind: EmbeddingKind) -> Result<Arc<dyn EmbeddingProvider>> {
        let raw = match kind {
            EmbeddingKind::Image => &self.image_embedder,
            EmbeddingKind::Text => &self.text_embedder,
        };
        Ok(match raw.as_deref().map(Endpoint::parse).transpose()? {
            None | Some(Endpoint::Stub(_)) => Arc::new(HashEmbedder::new(kind, 0)),
            Some(Endpoint::Url(url)) => Arc::new(HttpEmbedder::new(kind, url.as_str(), self.timeout())),
        })
    }
}

/// Receives pipeline milestones.
pub trait PipelineObserver: Sync {
    fn sampled(&self, _triplets: usize) {}
    fn progress(&self, _done: usize, _total: usize) {}
}

/// An observer that ignores everything.
pub struct NoObserver;

impl PipelineObserver for NoObserver {}

pub struct Pipeline {
    cfg: PipelineConfig,
    registry: Arc<ClauseRegistry>,
    filter: Option<ClauseFilter>,
    backends: Backends,
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("registry", &self.registry.version())
            .field("top_k", &self.cfg.top_k)
            .finish()
    }
}

impl Pipeline {
    /// `model` may be omitted only when `top_k` covers the whole registry.
    pub fn new(cfg: PipelineConfig, registry: ClauseRegistry, model: Option<FilterModel>, backends: Backends) -> Result<Pipeline> {
        cfg.magnify.validate()?;
        if cfg.top_k == 0 || cfg.stride == 0 || cfg.max_concurrency == 0 {
            return Err(Error::Validation("top_k, stride and max_concurrency must be at least 1".into()));
        }
        let filter = if cfg.top_k < registry.len() {
            let model = model.ok_or_else(|| {
                Error::Validation(format!(
                    "a clause filter model is required for top_k {} < {} clauses",
                    cfg.top_k,
                    registry.len()
                ))
            })?;
            Some(ClauseFilter::new(Arc::new(model), backends.text_embedder.clone()))
        } else {
            None
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.max_concurrency)
            .build()
            .map_err(|e| Error::Validation(format!("worker pool: {e}")))?;
        Ok(Pipeline {
            cfg,
            registry: Arc::new(registry),
            filter,
            backends,
            pool,
        })
    }

    /// Loads the registry, weights (with their clause-embedding sidecar when
    /// present) and backends named in the config.
    pub fn from_config(cfg: PipelineConfig) -> Result<Pipeline> {
        cfg.validate()?;
        let registry = cfg.load_registry()?;
        let backends = Backends::from_config(&cfg.backends)?;
        let model = match &cfg.filter_weights {
            Some(path) if cfg.top_k < registry.len() => Some(load_model(path)?),
            _ => None,
        };
        let pipeline = Pipeline::new(cfg, registry, model, backends)?;
        if let (Some(filter), Some(path)) = (&pipeline.filter, &pipeline.cfg.filter_weights) {
            let sidecar = ClauseEmbeddings::sidecar_path(path);
            if sidecar.exists() {
                let stored = ClauseEmbeddings::load(&sidecar)?;
                filter.text_cache().preload(&pipeline.registry, &stored);
            }
        }
        Ok(pipeline)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ClauseRegistry {
        &self.registry
    }

    pub fn analyze_path(&self, video_id: &str, path: &Path, observer: &dyn PipelineObserver) -> Result<ViolationReport> {
        let mut source = open_video(path).map_err(|e| e.at_stage(Stage::Sampling, 0))?;
        self.analyze_source(video_id, source.as_mut(), observer)
    }

    pub fn analyze_source(&self, video_id: &str, source: &mut dyn FrameSource, observer: &dyn PipelineObserver) -> Result<ViolationReport> {
        let results = self.analyze_triplets(video_id, source, observer)?;
        self.assemble(video_id, &results)
    }

    /// Per-triplet results in temporal order.
    pub fn analyze_triplets(&self, video_id: &str, source: &mut dyn FrameSource, observer: &dyn PipelineObserver) -> Result<Vec<AnalysisResult>> {
        let frames = sample_frames(source, self.cfg.target_fps).map_err(|e| e.at_stage(Stage::Sampling, 0))?;
        let triplets = make_triplets(video_id, &frames, self.cfg.stride).map_err(|e| e.at_stage(Stage::Sampling, 0))?;
        drop(frames);
        let total = triplets.len();
        observer.sampled(total);
        let done = Mutex::new(0usize);
        self.pool.install(|| {
            triplets
                .par_iter()
                .enumerate()
                .map(|(i, t)| {
                    let result = self.analyze_one(t).map_err(|(stage, e)| e.at_stage(stage, i))?;
                    let mut n = done.lock().expect("progress lock");
                    *n += 1;
                    observer.progress(*n, total);
                    Ok(result)
                })
                .collect()
        })
    }

    fn analyze_one(&self, triplet: &FrameTriplet) -> std::result::Result<AnalysisResult, (Stage, Error)> {
        let detections: Option<Vec<Detection>> = match &self.backends.detector {
            None => None,
            Some(det) => Some(
                with_retry(|| detect_checked(det.as_ref(), triplet.middle(), &self.cfg.detect_vocabulary))
                    .map_err(|e| (Stage::Detector, e))?,
            ),
        };
        let magnified = match &detections {
            Some(dets) => triplet
                .map_images(|f| Ok(apply_magnifier(f, dets, &self.cfg.magnify, self.backends.enhancer.as_ref())?.image))
                .map_err(|e| (Stage::Magnifier, e))?,
            None => triplet.clone(),
        };
        let clauses = match &self.filter {
            None => self.registry.clauses().to_vec(),
            Some(filter) => {
                let cf_input = if self.cfg.cf_uses_magnified { &magnified } else { triplet };
                let scores = filter
                    .score_triplet(cf_input, &self.registry, self.backends.image_embedder.as_ref())
                    .map_err(|e| (Stage::Filter, e))?;
                let ids = top_k(&scores, self.cfg.top_k).map_err(|e| (Stage::Filter, e))?;
                self.registry.select(&ids).map_err(|e| (Stage::Filter, e))?
            }
        };
        let annotation = match (&detections, self.cfg.annotate_prompts) {
            (Some(dets), true) => Some(format_annotation(dets)),
            _ => None,
        };
        analyze_triplet(
            &magnified,
            &clauses,
            self.backends.vlm.as_ref(),
            annotation.as_deref(),
            self.cfg.chat,
        )
        .map_err(|e| (Stage::Vlm, e))
    }

    /// Builds the report, merging repeats of a clause across overlapping windows.
    pub fn assemble(&self, video_id: &str, results: &[AnalysisResult]) -> Result<ViolationReport> {
        let stats = ReportStats {
            triplets_analyzed: results.len(),
            total_latency_s: results.iter().map(|r| r.latency_s).sum(),
        };
        let entries = merge_entries(results, &self.registry, self.cfg.stride < 3)?;
        ViolationReport::new(video_id, entries, stats, (*self.registry).clone())
    }
}

/// Weights are keyed to clause texts through their embeddings, so a model
/// trained for another registry version still loads.
fn load_model(path: &Path) -> Result<FilterModel> {
    FilterModel::load(path)
}

/// Violated verdicts as report entries. When `merge` is set, a clause flagged
/// in consecutive windows becomes one entry at the first window, keeping the
/// longest reasoning.
pub fn merge_entries(results: &[AnalysisResult], registry: &ClauseRegistry, merge: bool) -> Result<Vec<ReportEntry>> {
    let mut entries: Vec<ReportEntry> = Vec::new();
    // clause id -> (index into entries, window index of last hit)
    let mut open: std::collections::HashMap<u32, (usize, usize)> = std::collections::HashMap::new();
    for (w, result) in results.iter().enumerate() {
        for v in result.verdicts.iter().filter(|v| v.violated) {
            if !result.clauses_offered.contains(&v.clause_id) {
                return Err(Error::Contract(format!(
                    "verdict for clause {} that was not offered",
                    v.clause_id
                )));
            }
            let clause = registry
                .get(v.clause_id)
                .ok_or_else(|| Error::Validation(format!("verdict for unknown clause {}", v.clause_id)))?;
            match open.get_mut(&v.clause_id) {
                Some((idx, last)) if merge && *last + 1 == w => {
                    let entry = &mut entries[*idx];
                    if v.reasoning.chars().count() > entry.reasoning.chars().count() {
                        entry.reasoning = v.reasoning.clone();
                    }
                    *last = w;
                }
                _ => {
                    entries.push(ReportEntry {
                        timestamp_s: result.start_ts,
                        clause_id: clause.id,
                        clause_text: clause.text.clone(),
                        reasoning: v.reasoning.clone(),
                    });
                    open.insert(v.clause_id, (entries.len() - 1, w));
                }
            }
        }
    }
    Ok(entries)
}
