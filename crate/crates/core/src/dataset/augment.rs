//! Label-preserving image augmentations: horizontal flip, low light and
//! random occlusion of non-critical regions.

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BoundingBox;

pub const LOWLIGHT_RANGE: (f64, f64) = (0.5, 0.8);
pub const MASK_RANGE: (f64, f64) = (0.10, 0.30);
/// Proposals tried before the mask gives up.
pub const MASK_MAX_PROPOSALS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Flip,
    Lowlight,
    Mask,
}

impl AugmentKind {
    pub fn parse(raw: &str) -> Option<AugmentKind> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "flip" => Some(AugmentKind::Flip),
            "lowlight" => Some(AugmentKind::Lowlight),
            "mask" => Some(AugmentKind::Mask),
            _ => None,
        }
    }
}

/// A fully resolved augmentation, recorded alongside its output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lowlight_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_fraction: Option<f64>,
    pub seed: u64,
}

impl AugmentSpec {
    /// Draws any unspecified parameter uniformly from its allowed band.
    pub fn resolve(kind: AugmentKind, lowlight_factor: Option<f64>, mask_fraction: Option<f64>, seed: u64) -> Result<AugmentSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = match kind {
            AugmentKind::Flip => AugmentSpec {
                kind,
                lowlight_factor: None,
                mask_fraction: None,
                seed,
            },
            AugmentKind::Lowlight => AugmentSpec {
                kind,
                lowlight_factor: Some(
                    lowlight_factor.unwrap_or_else(|| rng.random_range(LOWLIGHT_RANGE.0..=LOWLIGHT_RANGE.1)),
                ),
                mask_fraction: None,
                seed,
            },
            AugmentKind::Mask => AugmentSpec {
                kind,
                lowlight_factor: None,
                mask_fraction: Some(mask_fraction.unwrap_or_else(|| rng.random_range(MASK_RANGE.0..=MASK_RANGE.1))),
                seed,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.lowlight_factor {
            check_factor(f)?;
        }
        if let Some(f) = self.mask_fraction {
            check_fraction(f)?;
        }
        Ok(())
    }
}

fn check_factor(factor: f64) -> Result<()> {
    if !(LOWLIGHT_RANGE.0..=LOWLIGHT_RANGE.1).contains(&factor) {
        return Err(Error::Validation(format!(
            "lowlight factor {factor} outside [{}, {}]",
            LOWLIGHT_RANGE.0, LOWLIGHT_RANGE.1
        )));
    }
    Ok(())
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(MASK_RANGE.0..=MASK_RANGE.1).contains(&fraction) {
        return Err(Error::Validation(format!(
            "mask fraction {fraction} outside [{}, {}]",
            MASK_RANGE.0, MASK_RANGE.1
        )));
    }
    Ok(())
}

/// Mirrors the image left to right and moves the boxes with it.
pub fn augment_flip(image: &RgbImage, boxes: &[BoundingBox]) -> Result<(RgbImage, Vec<BoundingBox>)> {
    let w = image.width();
    for b in boxes {
        b.check_within(w, image.height())?;
    }
    let flipped = imageops::flip_horizontal(image);
    let boxes = boxes
        .iter()
        .map(|b| BoundingBox {
            x0: w - b.x1,
            y0: b.y0,
            x1: w - b.x0,
            y1: b.y1,
        })
        .collect();
    Ok((flipped, boxes))
}

/// Scales every channel by `factor`, rounding to nearest.
pub fn augment_lowlight(image: &RgbImage, factor: f64) -> Result<RgbImage> {
    check_factor(factor)?;
    let mut out = image.clone();
    for v in out.iter_mut() {
        *v = (*v as f64 * factor).round().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutcome {
    pub image: RgbImage,
    /// Masked pixels over non-critical pixels.
    pub masked_area_fraction: f64,
    /// Pixels painted black.
    pub masked_pixels: u64,
    /// Largest single rectangle that may be proposed for this image.
    pub max_rect_pixels: u64,
}

/// Inclusive side-length bounds for mask rectangles along a dimension.
pub fn mask_side_bounds(dim: u32) -> (u32, u32) {
    let lo = ((0.05 * dim as f64).ceil() as u32).max(1);
    let hi = ((0.316 * dim as f64).floor() as u32).max(lo);
    (lo, hi.min(dim))
}

/// Paints seeded black rectangles outside `critical` until at least
/// `fraction` of the non-critical area is covered.
pub fn augment_mask(image: &RgbImage, critical: &[BoundingBox], fraction: f64, seed: u64) -> Result<MaskOutcome> {
    check_fraction(fraction)?;
    let (w, h) = image.dimensions();
    for b in critical {
        b.check_within(w, h)?;
    }
    let idx = |x: u32, y: u32| y as usize * w as usize + x as usize;
    let mut is_critical = vec![false; w as usize * h as usize];
    for b in critical {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                is_critical[idx(x, y)] = true;
            }
        }
    }
    let total = w as u64 * h as u64;
    let critical_px = is_critical.iter().filter(|&&c| c).count() as u64;
    if critical_px as f64 >= (1.0 - fraction) * total as f64 {
        return Err(Error::Validation(format!(
            "critical boxes cover {critical_px} of {total} pixels; too little room to mask {fraction}"
        )));
    }
    let free = total - critical_px;
    let target = fraction * free as f64;

    let (wlo, whi) = mask_side_bounds(w);
    let (hlo, hhi) = mask_side_bounds(h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; w as usize * h as usize];
    let mut count = 0u64;
    let mut out = image.clone();
    let mut proposals = 0;
    while (count as f64) < target {
        if proposals == MASK_MAX_PROPOSALS {
            return Err(Error::Saturation {
                achieved: count as f64 / free as f64,
                requested: fraction,
                proposals,
            });
        }
        proposals += 1;
        let rw = rng.random_range(wlo..=whi);
        let rh = rng.random_range(hlo..=hhi);
        let x0 = rng.random_range(0..=w - rw);
        let y0 = rng.random_range(0..=h - rh);
        let rect = BoundingBox {
            x0,
            y0,
            x1: x0 + rw,
            y1: y0 + rh,
        };
        if critical.iter().any(|c| c.intersects(&rect)) {
            continue;
        }
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                let i = idx(x, y);
                if !masked[i] {
                    masked[i] = true;
                    count += 1;
                    out.put_pixel(x, y, Rgb([0, 0, 0]));
                }
            }
        }
    }
    Ok(MaskOutcome {
        image: out,
        masked_area_fraction: count as f64 / free as f64,
        masked_pixels: count,
        max_rect_pixels: whi as u64 * hhi as u64,
    })
}
