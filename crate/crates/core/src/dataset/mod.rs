//! Dataset construction: frame sampling, triplets, augmentation, detection
//! annotations, instruction records and clause-filter pairs.

mod annotate;
mod augment;
mod pairs;
mod vqa;

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use annotate::{annotate_detections, format_annotation, NO_DETECTIONS};
pub use augment::{
    augment_flip, augment_lowlight, augment_mask, mask_side_bounds, AugmentKind, AugmentSpec, MaskOutcome,
    LOWLIGHT_RANGE, MASK_MAX_PROPOSALS, MASK_RANGE,
};
pub use pairs::{emit_filter_pairs, GroundTruthLabeler, Labeler, VlmJudgeLabeler};
pub use vqa::{emit_vqa, read_vqa, vqa_reader, Augmentation, VqaMeta, VqaRecord, VqaWriter};

use crate::error::{Error, Result};
use crate::magnifier::{detect_checked, DetectorClient};
use crate::types::{BoundingBox, Frame, FrameTriplet};
use crate::video::FrameSource;
use crate::vlm::AUX_HEADER;

/// Source frame index of the `k`-th sample.
pub fn sample_index(k: u64, native_fps: f64, target_fps: f64) -> u64 {
    (k as f64 * native_fps / target_fps).round() as u64
}

/// Keeps frames `round(k * native / target)` and stamps them `k / target` seconds.
pub fn sample_frames(source: &mut dyn FrameSource, target_fps: f64) -> Result<Vec<Frame>> {
    let native = source.info().fps;
    if !(target_fps > 0.0 && target_fps.is_finite()) {
        return Err(Error::Validation(format!("target fps must be positive, got {target_fps}")));
    }
    if native < target_fps {
        return Err(Error::Validation(format!(
            "target fps {target_fps} exceeds the native rate {native}"
        )));
    }
    let mut out = Vec::new();
    let mut k = 0u64;
    let mut wanted = sample_index(k, native, target_fps);
    while let Some(frame) = source.next_frame()? {
        if frame.index == wanted {
            out.push(Frame {
                timestamp_s: k as f64 / target_fps,
                ..frame
            });
            k += 1;
            wanted = sample_index(k, native, target_fps);
        }
    }
    Ok(out)
}

/// Windows `[i, i+1, i+2]` for `i = 0, stride, 2*stride, ...`.
pub fn make_triplets(video_id: &str, frames: &[Frame], stride: usize) -> Result<Vec<FrameTriplet>> {
    if stride == 0 {
        return Err(Error::Validation("stride must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i + 3 <= frames.len() {
        out.push(FrameTriplet::new(
            video_id,
            [frames[i].clone(), frames[i + 1].clone(), frames[i + 2].clone()],
        )?);
        i += stride;
    }
    Ok(out)
}

/// A triplet written to disk by [`ingest_video`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletManifest {
    pub id: String,
    pub video_id: String,
    pub start_ts: f64,
    /// Paths relative to the output directory.
    pub images: [String; 3],
}

/// Samples a video, writes sampled frames as PNG under `out_dir/<video_id>/`
/// and returns the triplet manifest.
pub fn ingest_video(
    source: &mut dyn FrameSource,
    video_id: &str,
    out_dir: &Path,
    target_fps: f64,
    stride: usize,
) -> Result<Vec<TripletManifest>> {
    let frames = sample_frames(source, target_fps)?;
    let dir = out_dir.join(video_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = |f: &Frame| format!("{video_id}/frame_{:06}.png", f.index);
    for f in &frames {
        let path = out_dir.join(name(f));
        f.image.save(&path).map_err(|e| Error::Provider {
            subject: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    let triplets = make_triplets(video_id, &frames, stride)?;
    Ok(triplets
        .iter()
        .map(|t| {
            let [a, b, c] = t.frames();
            TripletManifest {
                id: format!("{video_id}-{:08.3}", t.start_ts()),
                video_id: video_id.to_string(),
                start_ts: t.start_ts(),
                images: [name(a), name(b), name(c)],
            }
        })
        .collect())
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Provider {
            subject: format!("image {}", path.display()),
            message: e.to_string(),
        })?
        .to_rgb8())
}

/// Where augmentation reads and writes images.
#[derive(Debug, Clone)]
pub struct ImageDirs {
    /// Root that record image paths are relative to.
    pub input: PathBuf,
    /// Root for augmented images; new record paths are relative to it.
    pub output: PathBuf,
}

/// Produces the augmented copy of `record`. Labels and the assistant text are
/// inherited. Mask rectangles avoid the boxes found by `detector`, when given,
/// on each frame.
pub fn augment_record(
    record: &VqaRecord,
    spec: &AugmentSpec,
    dirs: &ImageDirs,
    detector: Option<(&dyn DetectorClient, &[String])>,
) -> Result<VqaRecord> {
    spec.validate()?;
    let tag = match spec.kind {
        AugmentKind::Flip => "flip",
        AugmentKind::Lowlight => "lowlight",
        AugmentKind::Mask => "mask",
    };
    let id = format!("{}-{tag}", record.id);
    let mut images: [String; 3] = Default::default();
    for (i, rel) in record.images.iter().enumerate() {
        let src = load_rgb(&dirs.input.join(rel))?;
        let out = match spec.kind {
            AugmentKind::Flip => augment_flip(&src, &[])?.0,
            AugmentKind::Lowlight => augment_lowlight(&src, spec.lowlight_factor.unwrap_or(LOWLIGHT_RANGE.0))?,
            AugmentKind::Mask => {
                let critical: Vec<BoundingBox> = match detector {
                    Some((det, vocab)) => {
                        let frame = Frame::new(i as u64, 0.0, src.clone())?;
                        detect_checked(det, &frame, vocab)?.into_iter().map(|d| d.bbox).collect()
                    }
                    None => Vec::new(),
                };
                augment_mask(&src, &critical, spec.mask_fraction.unwrap_or(MASK_RANGE.0), spec.seed)?.image
            }
        };
        let stem = Path::new(rel).file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        let new_rel = format!("{id}/{i}_{stem}.png");
        let dst = dirs.output.join(&new_rel);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        out.save(&dst).map_err(|e| Error::Provider {
            subject: dst.display().to_string(),
            message: e.to_string(),
        })?;
        images[i] = new_rel;
    }
    let mut meta = record.meta.clone();
    meta.augmentation = match spec.kind {
        AugmentKind::Flip => Augmentation::Flip,
        AugmentKind::Lowlight => Augmentation::Lowlight,
        AugmentKind::Mask => Augmentation::Mask,
    };
    meta.lowlight_factor = spec.lowlight_factor;
    meta.mask_fraction = spec.mask_fraction;
    meta.seed = Some(spec.seed);
    Ok(VqaRecord {
        id,
        images,
        meta,
        ..record.clone()
    })
}

/// A copy of `record` whose user prompt carries the detections on its key frame.
pub fn annotate_record(
    record: &VqaRecord,
    image_root: &Path,
    detector: &dyn DetectorClient,
    vocabulary: &[String],
) -> Result<VqaRecord> {
    let image = load_rgb(&image_root.join(record.key_image()))?;
    let frame = Frame::new(1, record.meta.start_ts, image)?;
    let block = annotate_detections(&frame, detector, vocabulary)?;
    let mut meta = record.meta.clone();
    meta.augmentation = Augmentation::Detect;
    Ok(VqaRecord {
        id: format!("{}-detect", record.id),
        user_prompt: format!("{}\n\n{AUX_HEADER}\n{block}", record.user_prompt),
        meta,
        ..record.clone()
    })
}
