//! Detection metrics, Top-K coverage of the clause filter and latency sweeps.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clause_filter::{top_k, ClauseFilter, FilterModel};
use crate::error::{Error, Result};
use crate::pipeline::{Backends, NoObserver, Pipeline, PipelineConfig};
use crate::registry::ClauseRegistry;
use crate::video::MemorySource;
use crate::vlm::{CostModel, MockBackend};

/// Predicted and labeled violations for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalSample {
    pub predicted: BTreeSet<u32>,
    pub truth: BTreeSet<u32>,
}

impl EvalSample {
    pub fn new(predicted: impl IntoIterator<Item = u32>, truth: impl IntoIterator<Item = u32>) -> EvalSample {
        EvalSample {
            predicted: predicted.into_iter().collect(),
            truth: truth.into_iter().collect(),
        }
    }

    pub fn validate(&self, registry: &ClauseRegistry) -> Result<()> {
        for id in self.predicted.iter().chain(&self.truth) {
            if registry.get(*id).is_none() {
                return Err(Error::Validation(format!("clause {id} is not in the registry")));
            }
        }
        Ok(())
    }
}

/// Micro counts over every (sample, clause) decision: `(tp, fp, fn)`.
pub fn confusion(samples: &[EvalSample]) -> (u64, u64, u64) {
    samples.iter().fold((0, 0, 0), |(tp, fp, fn_), s| {
        let hit = s.predicted.intersection(&s.truth).count() as u64;
        (
            tp + hit,
            fp + s.predicted.len() as u64 - hit,
            fn_ + s.truth.len() as u64 - hit,
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsResult {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub f1_defined: bool,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F1 from counts. Ratios with a zero denominator are absent.
pub fn metrics(tp: u64, fp: u64, fn_: u64) -> MetricsResult {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => Some(f1_from(p, r)),
        _ => None,
    };
    MetricsResult {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
        precision_defined: precision.is_some(),
        recall_defined: recall.is_some(),
        f1_defined: f1.is_some(),
    }
}

pub fn evaluate(samples: &[EvalSample]) -> MetricsResult {
    let (tp, fp, fn_) = confusion(samples);
    metrics(tp, fp, fn_)
}

/// Reads `{"predicted": [..], "truth": [..]}` lines.
pub fn read_eval_samples(path: impl AsRef<Path>) -> Result<Vec<EvalSample>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(crate::error::parse_json::<EvalSample>(&line).map_err(|e| with_line(e, i + 1))?);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct IdsLine {
    #[serde(alias = "predicted", alias = "truth")]
    ids: Vec<u32>,
}

fn read_id_sets(path: &Path) -> Result<Vec<BTreeSet<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let parsed: IdsLine = crate::error::parse_json(l).map_err(|e| with_line(e, i + 1))?;
            Ok(parsed.ids.into_iter().collect())
        })
        .collect()
}

/// Pairs a predictions file with a truth file line by line. Each line holds
/// `{"predicted": [..]}` or `{"truth": [..]}` respectively.
pub fn read_split_samples(pred: impl AsRef<Path>, truth: impl AsRef<Path>) -> Result<Vec<EvalSample>> {
    let pred = read_id_sets(pred.as_ref())?;
    let truth = read_id_sets(truth.as_ref())?;
    if pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "{} prediction lines but {} truth lines",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred
        .into_iter()
        .zip(truth)
        .map(|(predicted, truth)| EvalSample { predicted, truth })
        .collect())
}

fn with_line(err: Error, line: usize) -> Error {
    match err {
        Error::Schema {
            path, column, message, ..
        } => Error::Schema {
            path,
            line,
            column,
            message,
        },
        other => other,
    }
}

/// An image embedding with its labeled violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSample {
    pub image: Vec<f64>,
    pub truth: BTreeSet<u32>,
}

/// Fraction of samples whose labeled violations all appear in the top `k`.
/// Samples without violations count as covered.
pub fn coverage_at_k(filter: &ClauseFilter, samples: &[CoverageSample], registry: &ClauseRegistry, k: usize) -> Result<f64> {
    Ok(coverage_curve(filter, samples, registry, &[k])?[0].1)
}

/// Coverage for each K, scoring every sample once.
pub fn coverage_curve(
    filter: &ClauseFilter,
    samples: &[CoverageSample],
    registry: &ClauseRegistry,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if samples.is_empty() {
        return Err(Error::Validation("coverage needs at least one sample".into()));
    }
    let mut covered = vec![0usize; ks.len()];
    for sample in samples {
        let scores = filter.score_all(&sample.image, registry)?;
        for (slot, &k) in covered.iter_mut().zip(ks) {
            let chosen: BTreeSet<u32> = top_k(&scores, k)?.into_iter().collect();
            if sample.truth.is_subset(&chosen) {
                *slot += 1;
            }
        }
    }
    Ok(ks
        .iter()
        .zip(covered)
        .map(|(&k, c)| (k, c as f64 / samples.len() as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub latencies_s: Vec<f64>,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl LatencyStats {
    pub fn from_latencies(latencies_s: Vec<f64>) -> Result<LatencyStats> {
        if latencies_s.is_empty() {
            return Err(Error::Validation("no latencies to summarize".into()));
        }
        let mut sorted = latencies_s.clone();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        Ok(LatencyStats {
            mean,
            p50: quantile(&sorted, 0.5),
            p95: quantile(&sorted, 0.95),
            latencies_s,
        })
    }
}

/// Linear interpolation between closest ranks on sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// A short seeded noise video used by the latency sweeps.
#[derive(Debug, Clone)]
pub struct SweepVideo {
    pub fps: f64,
    pub frames: Vec<RgbImage>,
}

impl SweepVideo {
    pub fn synthetic(seconds: usize, width: u32, height: u32, seed: u64) -> SweepVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..seconds)
            .map(|_| RgbImage::from_fn(width, height, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()])))
            .collect();
        SweepVideo { fps: 1.0, frames }
    }

    fn source(&self) -> Result<MemorySource> {
        MemorySource::new(self.fps, self.frames.clone())
    }
}

/// Latencies reported by the mock for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMeasurement {
    pub latency: LatencyStats,
    pub mean_prompt_chars: f64,
}

/// Runs the pipeline over `video` with a cost-model mock and collects its
/// per-triplet latencies. `top_k >= registry.len()` disables the filter.
pub fn measure_arm(
    base: &PipelineConfig,
    registry: &ClauseRegistry,
    model: Option<&FilterModel>,
    top_k: usize,
    cost: CostModel,
    video: &SweepVideo,
) -> Result<ArmMeasurement> {
    let mock = Arc::new(MockBackend::new(vec![]).with_cost(cost));
    let cfg = PipelineConfig {
        top_k: top_k.min(registry.len()),
        ..base.clone()
    };
    let pipeline = Pipeline::new(cfg, registry.clone(), model.cloned(), Backends::with_vlm(mock.clone()))?;
    let results = pipeline.analyze_triplets("sweep", &mut video.source()?, &NoObserver)?;
    let latency = LatencyStats::from_latencies(results.iter().map(|r| r.latency_s).collect())?;
    let chars = mock.prompt_chars_seen();
    let mean_prompt_chars = chars.iter().sum::<usize>() as f64 / chars.len().max(1) as f64;
    Ok(ArmMeasurement {
        latency,
        mean_prompt_chars,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub clause_count: usize,
    pub mean_latency_cf_s: f64,
    pub mean_latency_no_cf_s: f64,
}

/// Mean latency with the filter at `k` and without it, on synthetic
/// registries of each size.
pub fn latency_sweep(
    base: &PipelineConfig,
    model: &FilterModel,
    k: usize,
    cost: CostModel,
    clause_counts: &[usize],
    video: &SweepVideo,
) -> Result<Vec<SweepRow>> {
    clause_counts
        .iter()
        .map(|&count| {
            let registry = ClauseRegistry::synthetic(count)?;
            let cf = measure_arm(base, &registry, Some(model), k, cost, video)?;
            let no_cf = measure_arm(base, &registry, None, count, cost, video)?;
            Ok(SweepRow {
                clause_count: count,
                mean_latency_cf_s: cf.latency.mean,
                mean_latency_no_cf_s: no_cf.latency.mean,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Validation(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
