//! A small self-contained scenario: a three-second video, replayed detections,
//! a scripted VLM and filter weights that rank one clause first. Used by the
//! end-to-end tests and by `analyze` demos that must run offline.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2};

use crate::clause_filter::{
    EmbeddingProvider, FilterMetadata, FilterModel, HashEmbedder, Payload, FILTER_DIMS, IMAGE_DIM,
};
use crate::error::{Error, Result};
use crate::magnifier::FixtureLine;
use crate::nnlab::{DenseLayer, Mlp};
use crate::pipeline::{BackendsConfig, PipelineConfig};
use crate::registry::ClauseRegistry;
use crate::types::{BoundingBox, Detection};
use crate::video::write_raw_video;
use crate::vlm::MockRule;

pub const FIXTURE_FPS: f64 = 30.0;
pub const FIXTURE_FRAMES: usize = 91;
pub const FIXTURE_WIDTH: u32 = 64;
pub const FIXTURE_HEIGHT: u32 = 48;
/// The clause the scripted VLM flags.
pub const FIXTURE_CLAUSE: u32 = 19;
/// Source frame carrying the phone; it is the middle frame of the window at 1 s.
pub const PHONE_FRAME: u64 = 60;

/// Paths written by [`write_fixture`] and a config that uses them.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub dir: PathBuf,
    pub video: PathBuf,
    pub detections: PathBuf,
    pub vlm_script: PathBuf,
    pub weights: PathBuf,
    pub config: PipelineConfig,
}

/// Frame `i` of the fixture video: a dim site scene with a worker silhouette
/// that drifts right, and a bright phone near the worker's hand from 2 s on.
pub fn fixture_frames() -> Vec<RgbImage> {
    (0..FIXTURE_FRAMES)
        .map(|i| {
            let shift = (i / 10) as u32;
            RgbImage::from_fn(FIXTURE_WIDTH, FIXTURE_HEIGHT, |x, y| {
                let worker = (20 + shift..30 + shift).contains(&x) && (30..40).contains(&y);
                let phone = i as u64 >= PHONE_FRAME && (31 + shift..34 + shift).contains(&x) && (32..35).contains(&y);
                if phone {
                    Rgb([240, 240, 250])
                } else if worker {
                    Rgb([200, 120, 40])
                } else {
                    Rgb([(x * 2) as u8, (y * 3) as u8, 60 + i as u8])
                }
            })
        })
        .collect()
}

/// Detections on the two window middles (source frames 30 and 60).
pub fn fixture_detections() -> Result<Vec<FixtureLine>> {
    let worker = |frame: u64| -> Result<Detection> {
        let shift = (frame / 10) as u32;
        Detection::new(BoundingBox::new(20 + shift, 30, 30 + shift, 40)?, "worker", 0.91)
    };
    let phone_shift = (PHONE_FRAME / 10) as u32;
    Ok(vec![
        FixtureLine {
            frame: "30".into(),
            detections: vec![worker(30)?],
        },
        FixtureLine {
            frame: PHONE_FRAME.to_string(),
            detections: vec![
                worker(PHONE_FRAME)?,
                Detection::new(
                    BoundingBox::new(31 + phone_shift, 32, 34 + phone_shift, 35)?,
                    "mobile phone",
                    0.88,
                )?,
            ],
        },
    ])
}

pub fn fixture_script() -> Vec<MockRule> {
    let verdict = format!(
        "The worker holds a handheld phone near the face while standing in the work zone.\n\
         [{{\"clause_id\": {FIXTURE_CLAUSE}, \"violated\": true, \"reasoning\": \"worker is using a mobile phone in the work zone\"}}]"
    );
    vec![MockRule {
        pattern: "mobile phone".into(),
        response: verdict,
    }]
}

/// Weights whose first hidden unit responds to the fixture clause's text
/// embedding and feeds straight through to the output, so that clause ranks
/// first on any frame.
pub fn fixture_model(registry: &ClauseRegistry) -> Result<FilterModel> {
    const GAIN: f64 = 10.0;
    let clause = registry
        .get(FIXTURE_CLAUSE)
        .ok_or_else(|| Error::Validation(format!("registry lacks clause {FIXTURE_CLAUSE}")))?;
    let target = HashEmbedder::text().embed(Payload::Text(&clause.text))?;
    let mut layers = Vec::with_capacity(FILTER_DIMS.len() - 1);
    for (i, pair) in FILTER_DIMS.windows(2).enumerate() {
        let (d_in, d_out) = (pair[0], pair[1]);
        let mut w = Array2::<f64>::zeros((d_out, d_in));
        let mut b = Array1::<f64>::zeros(d_out);
        if i == 0 {
            for (j, v) in target.iter().enumerate() {
                w[[0, IMAGE_DIM + j]] = GAIN * v;
            }
        } else {
            w[[0, 0]] = 1.0;
        }
        if i == FILTER_DIMS.len() - 2 {
            b[0] = -GAIN / 2.0;
        }
        layers.push(DenseLayer::new(w, b)?);
    }
    FilterModel::new(
        Mlp::new(layers)?,
        FilterMetadata {
            registry_version: registry.version().to_string(),
            seed: 0,
            trained_at: None,
        },
    )
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the fixture into `dir` and returns a stub-backed config for it.
pub fn write_fixture(dir: impl AsRef<Path>) -> Result<Fixture> {
    let dir = dir.as_ref().to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let video = dir.join("fixture.mvraw");
    write_raw_video(&video, FIXTURE_FPS, &fixture_frames())?;
    let detections = dir.join("detections.jsonl");
    write_jsonl(&detections, &fixture_detections()?)?;
    let vlm_script = dir.join("vlm_script.jsonl");
    write_jsonl(&vlm_script, &fixture_script())?;
    let weights = dir.join("cf_weights.json");
    fixture_model(&ClauseRegistry::bundled())?.save(&weights)?;

    let config = PipelineConfig {
        filter_weights: Some(weights.clone()),
        backends: BackendsConfig {
            vlm: Some(format!("stub:{}", vlm_script.display())),
            detector: Some(format!("stub:{}", detections.display())),
            ..BackendsConfig::default()
        },
        ..PipelineConfig::default()
    };
    Ok(Fixture {
        dir,
        video,
        detections,
        vlm_script,
        weights,
        config,
    })
}
