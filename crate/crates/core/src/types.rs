//! Domain types shared by every stage of the engine.

use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::registry::ClauseRegistry;

/// Regulation category of a clause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    WorkerBehavior,
    ToolsEquipment,
    Ppe,
}

impl Category {
    pub const ALL: [Category; 3] = [
        Category::WorkerBehavior,
        Category::ToolsEquipment,
        Category::Ppe,
    ];

    /// Canonical label written to registry files.
    pub fn label(self) -> &'static str {
        match self {
            Category::WorkerBehavior => "Unsafe worker behavior",
            Category::ToolsEquipment => "Unsafe use of tools and equipment",
            Category::Ppe => "PPE",
        }
    }

    /// Case-insensitive parse of a category label. Accepts the canonical labels
    /// and the enum variant names.
    pub fn parse(raw: &str) -> Option<Category> {
        let norm = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        match norm.as_str() {
            "unsafe worker behavior" | "unsafe worker behaviour" | "workerbehavior" => {
                Some(Category::WorkerBehavior)
            }
            "unsafe use of tools and equipment" | "toolsequipment" => Some(Category::ToolsEquipment),
            "ppe" | "personal protective equipment" => Some(Category::Ppe),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for Category {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Category::parse(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown clause category {raw:?}")))
    }
}

/// A numbered safety regulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub id: u32,
    pub category: Category,
    pub text: String,
}

/// A decoded video frame.
///
/// `timestamp_s` is the position of the frame on the video timeline. Frames read
/// straight from a source carry `index / native_fps`; sampled frames carry their
/// nominal sample time.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: u64,
    pub timestamp_s: f64,
    pub image: RgbImage,
}

impl Frame {
    /// Frame at `index` of a video running at `native_fps`.
    pub fn at_index(index: u64, native_fps: f64, image: RgbImage) -> Result<Frame> {
        if !(native_fps.is_finite() && native_fps > 0.0) {
            return Err(Error::Validation(format!("native fps must be positive, got {native_fps}")));
        }
        Frame::new(index, index as f64 / native_fps, image)
    }

    pub fn new(index: u64, timestamp_s: f64, image: RgbImage) -> Result<Frame> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Validation("frame must be at least 1x1".into()));
        }
        if !(timestamp_s.is_finite() && timestamp_s >= 0.0) {
            return Err(Error::Validation(format!("invalid frame timestamp {timestamp_s}")));
        }
        Ok(Frame {
            index,
            timestamp_s,
            image,
        })
    }

    /// Builds a frame from a row-major RGB buffer.
    pub fn from_rgb(index: u64, timestamp_s: f64, width: u32, height: u32, pixels: Vec<u8>) -> Result<Frame> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::shape(format!("{expected} bytes ({width}x{height}x3)"), pixels.len()));
        }
        let image = RgbImage::from_raw(width, height, pixels)
            .ok_or_else(|| Error::Validation("pixel buffer does not match dimensions".into()))?;
        Frame::new(index, timestamp_s, image)
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn pixels(&self) -> &[u8] {
        self.image.as_raw()
    }

    /// Identifier used to key detector fixtures and logs.
    pub fn id(&self) -> String {
        self.index.to_string()
    }

    pub fn with_image(&self, image: RgbImage) -> Frame {
        Frame {
            index: self.index,
            timestamp_s: self.timestamp_s,
            image,
        }
    }
}

/// Three consecutive sampled frames, the unit of violation analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTriplet {
    pub video_id: String,
    frames: [Frame; 3],
}

impl FrameTriplet {
    pub fn new(video_id: impl Into<String>, frames: [Frame; 3]) -> Result<FrameTriplet> {
        let d1 = frames[1].timestamp_s - frames[0].timestamp_s;
        let d2 = frames[2].timestamp_s - frames[1].timestamp_s;
        if d1 <= 0.0 || d2 <= 0.0 {
            return Err(Error::Validation("triplet frames must be ordered by timestamp".into()));
        }
        if (d1 - d2).abs() > 1e-9 * d1.max(1.0) {
            return Err(Error::Validation(format!(
                "triplet frames must be evenly spaced, got gaps {d1} and {d2}"
            )));
        }
        Ok(FrameTriplet {
            video_id: video_id.into(),
            frames,
        })
    }

    pub fn frames(&self) -> &[Frame; 3] {
        &self.frames
    }

    pub fn first(&self) -> &Frame {
        &self.frames[0]
    }

    pub fn middle(&self) -> &Frame {
        &self.frames[1]
    }

    pub fn start_ts(&self) -> f64 {
        self.frames[0].timestamp_s
    }

    pub fn interval_s(&self) -> f64 {
        self.frames[1].timestamp_s - self.frames[0].timestamp_s
    }

    /// Same timing, new pixels (e.g. after magnification).
    pub fn map_images(&self, mut f: impl FnMut(&Frame) -> Result<RgbImage>) -> Result<FrameTriplet> {
        let [a, b, c] = &self.frames;
        Ok(FrameTriplet {
            video_id: self.video_id.clone(),
            frames: [a.with_image(f(a)?), b.with_image(f(b)?), c.with_image(f(c)?)],
        })
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`, serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<BoundingBox> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Validation(format!(
                "degenerate box [{x0},{y0},{x1},{y1}]"
            )));
        }
        Ok(BoundingBox { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        if self.fits(width, height) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "box [{},{},{},{}] outside {width}x{height} frame",
                self.x0, self.y0, self.x1, self.y1
            )))
        }
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x0, self.y0, self.x1, self.y1)
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.x0, self.y0, self.x1, self.y1].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x0, y0, x1, y1] = <[u32; 4]>::deserialize(d)?;
        BoundingBox::new(x0, y0, x1, y1).map_err(serde::de::Error::custom)
    }
}

/// One open-vocabulary detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, label: impl Into<String>, confidence: f64) -> Result<Detection> {
        let det = Detection {
            bbox,
            label: label.into(),
            confidence,
        };
        det.validate()?;
        Ok(det)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.trim().is_empty() {
            return Err(Error::Validation("detection label is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Validation(format!(
                "detection confidence {} outside [0,1]",
                self.confidence
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, width: u32, height: u32) -> Result<()> {
        self.validate()?;
        self.bbox.check_within(width, height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClauseVerdict {
    pub clause_id: u32,
    pub violated: bool,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub timestamp_s: f64,
    pub clause_id: u32,
    pub clause_text: String,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportStats {
    pub triplets_analyzed: usize,
    pub total_latency_s: f64,
}

/// Timestamped clause violations found in one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub video_id: String,
    pub entries: Vec<ReportEntry>,
    /// RFC 3339 wall-clock time of report assembly.
    pub generated_at: String,
    pub stats: ReportStats,
    pub registry: ClauseRegistry,
}

/// Violated verdicts found for one analysis window.
#[derive(Debug, Clone)]
pub struct TimedVerdicts {
    pub timestamp_s: f64,
    pub verdicts: Vec<ClauseVerdict>,
}

impl ViolationReport {
    /// Builds a report from per-window verdicts. Only `violated` verdicts become
    /// entries; entries are sorted by `(timestamp_s, clause_id)`.
    pub fn from_verdicts(
        video_id: impl Into<String>,
        registry: &ClauseRegistry,
        windows: &[TimedVerdicts],
        stats: ReportStats,
    ) -> Result<ViolationReport> {
        let mut entries = Vec::new();
        for window in windows {
            for verdict in window.verdicts.iter().filter(|v| v.violated) {
                let clause = registry.get(verdict.clause_id).ok_or_else(|| {
                    Error::Validation(format!("verdict for unknown clause {}", verdict.clause_id))
                })?;
                entries.push(ReportEntry {
                    timestamp_s: window.timestamp_s,
                    clause_id: clause.id,
                    clause_text: clause.text.clone(),
                    reasoning: verdict.reasoning.clone(),
                });
            }
        }
        ViolationReport::new(video_id, entries, stats, registry.clone())
    }

    pub fn new(
        video_id: impl Into<String>,
        mut entries: Vec<ReportEntry>,
        stats: ReportStats,
        registry: ClauseRegistry,
    ) -> Result<ViolationReport> {
        for entry in &entries {
            if registry.get(entry.clause_id).is_none() {
                return Err(Error::Validation(format!(
                    "report entry references unknown clause {}",
                    entry.clause_id
                )));
            }
        }
        entries.sort_by(|a, b| {
            a.timestamp_s
                .total_cmp(&b.timestamp_s)
                .then(a.clause_id.cmp(&b.clause_id))
        });
        Ok(ViolationReport {
            video_id: video_id.into(),
            entries,
            generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            stats,
            registry,
        })
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
