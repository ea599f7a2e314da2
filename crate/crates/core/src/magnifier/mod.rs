//! Behavior magnifier: enlarge small detected workers in place so the VLM can
//! see them, leaving every other pixel untouched.

mod detect;
mod enhance;

use image::{imageops, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use detect::{detect_checked, DetectorClient, FixtureDetector, FixtureLine, HttpDetector};
pub use enhance::{Bicubic, Enhancer, HttpEnhancer};

use crate::error::{Error, Result};
use crate::types::{BoundingBox, Detection, Frame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MagnifyConfig {
    pub scale: u32,
    /// Only boxes covering less than this fraction of the frame are enlarged.
    pub min_area_fraction: f64,
    pub vocabulary: Vec<String>,
    pub max_regions: usize,
}

impl Default for MagnifyConfig {
    fn default() -> Self {
        MagnifyConfig {
            scale: 2,
            min_area_fraction: 0.05,
            vocabulary: vec!["worker".to_string()],
            max_regions: 8,
        }
    }
}

impl MagnifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 2 {
            return Err(Error::Validation(format!("magnifier scale must be at least 2, got {}", self.scale)));
        }
        if !(self.min_area_fraction > 0.0 && self.min_area_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "min_area_fraction must lie in (0, 1), got {}",
                self.min_area_fraction
            )));
        }
        Ok(())
    }

    fn matches(&self, label: &str) -> bool {
        let label = label.trim();
        self.vocabulary.iter().any(|v| v.trim().eq_ignore_ascii_case(label))
    }
}

/// Detections worth enlarging, in paint order (ascending confidence).
pub fn select_targets(detections: &[Detection], width: u32, height: u32, cfg: &MagnifyConfig) -> Vec<Detection> {
    let frame_area = width as f64 * height as f64;
    let mut kept: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .filter(|(_, d)| cfg.matches(&d.label) && (d.bbox.area() as f64) / frame_area < cfg.min_area_fraction)
        .collect();
    // Highest confidence first for the cap; earlier input wins ties.
    kept.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence).then(a.0.cmp(&b.0)));
    kept.truncate(cfg.max_regions);
    kept.sort_by(|a, b| a.1.confidence.total_cmp(&b.1.confidence).then(a.0.cmp(&b.0)));
    kept.into_iter().map(|(_, d)| d.clone()).collect()
}

/// An enlarged crop and where it goes.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnifiedRegion {
    pub crop_out: RgbImage,
    pub placement: BoundingBox,
}

/// The `scale`× enlargement of `bbox`, centered on the box and clipped to the frame.
pub fn magnify_region(frame: &Frame, bbox: &BoundingBox, scale: u32, enhancer: &dyn Enhancer) -> Result<MagnifiedRegion> {
    bbox.check_within(frame.width(), frame.height())?;
    if scale < 1 {
        return Err(Error::Validation("scale must be positive".into()));
    }
    let (w, h) = (bbox.width(), bbox.height());
    let crop = imageops::crop_imm(&frame.image, bbox.x0, bbox.y0, w, h).to_image();
    let enlarged = enhancer.upscale(&crop, scale)?;
    if enlarged.dimensions() != (w * scale, h * scale) {
        return Err(Error::Contract(format!(
            "enhancer returned {}x{} for a {w}x{h} crop at scale {scale}",
            enlarged.width(),
            enlarged.height()
        )));
    }

    let (px0, px1) = clip_span(bbox.x0, w, scale, frame.width());
    let (py0, py1) = clip_span(bbox.y0, h, scale, frame.height());
    let placement = BoundingBox::new(px0.clip, py0.clip, px1, py1)?;
    let crop_out = imageops::crop_imm(&enlarged, px0.skip, py0.skip, placement.width(), placement.height()).to_image();
    Ok(MagnifiedRegion { crop_out, placement })
}

struct SpanStart {
    /// First in-frame coordinate.
    clip: u32,
    /// Leading enlarged pixels that fall off the frame.
    skip: u32,
}

/// Span `[start - floor((scale-1)·len/2), +scale·len)` clipped to `[0, limit)`.
fn clip_span(start: u32, len: u32, scale: u32, limit: u32) -> (SpanStart, u32) {
    let offset = ((scale as i64 - 1) * len as i64) / 2;
    let lo = start as i64 - offset;
    let hi = lo + (scale as i64) * len as i64;
    let clip = lo.max(0);
    let end = hi.min(limit as i64);
    (
        SpanStart {
            clip: clip as u32,
            skip: (clip - lo) as u32,
        },
        end as u32,
    )
}

/// Enlarges the selected detections and paints them over the frame.
pub fn apply_magnifier(frame: &Frame, detections: &[Detection], cfg: &MagnifyConfig, enhancer: &dyn Enhancer) -> Result<Frame> {
    cfg.validate()?;
    for d in detections {
        d.validate_for(frame.width(), frame.height())?;
    }
    let targets = select_targets(detections, frame.width(), frame.height(), cfg);
    if targets.is_empty() {
        return Ok(frame.clone());
    }
    let regions: Vec<MagnifiedRegion> = targets
        .par_iter()
        .map(|d| magnify_region(frame, &d.bbox, cfg.scale, enhancer))
        .collect::<Result<_>>()?;
    let mut out = frame.image.clone();
    for region in &regions {
        imageops::replace(
            &mut out,
            &region.crop_out,
            region.placement.x0 as i64,
            region.placement.y0 as i64,
        );
    }
    Ok(frame.with_image(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn det(x0: u32, y0: u32, x1: u32, y1: u32, label: &str, conf: f64) -> Detection {
        Detection::new(BoundingBox::new(x0, y0, x1, y1).unwrap(), label, conf).unwrap()
    }

    fn frame(w: u32, h: u32) -> Frame {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([x as u8, y as u8, (x * 7 + y * 3) as u8]));
        Frame::new(0, 0.0, img).unwrap()
    }

    #[test]
    fn centered_placement_geometry() {
        let f = frame(100, 100);
        let r = magnify_region(&f, &BoundingBox::new(40, 40, 60, 60).unwrap(), 2, &Bicubic).unwrap();
        assert_eq!(r.placement, BoundingBox::new(30, 30, 70, 70).unwrap());
        assert_eq!(r.crop_out.dimensions(), (40, 40));

        let r = magnify_region(&f, &BoundingBox::new(0, 0, 10, 10).unwrap(), 2, &Bicubic).unwrap();
        assert_eq!(r.placement, BoundingBox::new(0, 0, 15, 15).unwrap());
        assert_eq!(r.crop_out.dimensions(), (15, 15));
    }

    #[test]
    fn large_boxes_and_foreign_labels_are_skipped() {
        let cfg = MagnifyConfig::default();
        let dets = vec![
            det(0, 0, 100, 50, "worker", 0.9),
            det(0, 0, 10, 10, "helmet", 0.9),
            det(0, 0, 10, 10, "Worker", 0.4),
        ];
        let got = select_targets(&dets, 100, 100, &cfg);
        assert_eq!(got, vec![dets[2].clone()]);
    }

    #[test]
    fn cap_keeps_most_confident_in_paint_order() {
        let cfg = MagnifyConfig::default();
        let dets: Vec<Detection> = (0..10).map(|i| det(i, 0, i + 5, 5, "worker", i as f64 / 10.0)).collect();
        let got = select_targets(&dets, 100, 100, &cfg);
        let confs: Vec<f64> = got.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
    }

    #[test]
    fn overlap_is_painted_by_most_confident() {
        let mut img = RgbImage::from_pixel(100, 100, Rgb([0, 0, 0]));
        for (x, y, p) in img.enumerate_pixels_mut() {
            if (20..30).contains(&x) && (20..30).contains(&y) {
                *p = Rgb([255, 0, 0]);
            }
            if (26..36).contains(&x) && (20..30).contains(&y) && x >= 30 {
                *p = Rgb([0, 0, 255]);
            }
        }
        let f = Frame::new(0, 0.0, img).unwrap();
        let dets = vec![det(26, 20, 36, 30, "worker", 0.9), det(20, 20, 30, 30, "worker", 0.6)];
        let out = apply_magnifier(&f, &dets, &MagnifyConfig::default(), &Bicubic).unwrap();
        let strong = magnify_region(&f, &dets[0].bbox, 2, &Bicubic).unwrap();
        // Pixel (30, 25) lies in both placements.
        let p = strong.placement;
        assert!(p.contains(30, 25));
        assert_eq!(out.image.get_pixel(30, 25), strong.crop_out.get_pixel(30 - p.x0, 25 - p.y0));
    }

    #[test]
    fn wrong_enhancer_dims_are_a_contract_error() {
        struct Lazy;
        impl Enhancer for Lazy {
            fn upscale(&self, crop: &RgbImage, _scale: u32) -> Result<RgbImage> {
                Ok(crop.clone())
            }
        }
        let f = frame(20, 20);
        let err = magnify_region(&f, &BoundingBox::new(2, 2, 6, 6).unwrap(), 2, &Lazy).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = MagnifyConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.scale = 1;
        assert!(cfg.validate().is_err());
        cfg.scale = 2;
        cfg.min_area_fraction = 1.0;
        assert!(cfg.validate().is_err());
    }
}
