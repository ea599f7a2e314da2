//! Detection annotations appended to the user prompt.

use crate::error::{Error, Result};
use crate::magnifier::{detect_checked, DetectorClient};
use crate::types::{Detection, Frame};

pub const NO_DETECTIONS: &str = "no key objects detected";

/// One line per detection, most confident first; input order breaks ties.
pub fn format_annotation(detections: &[Detection]) -> String {
    if detections.is_empty() {
        return NO_DETECTIONS.to_string();
    }
    let mut ordered: Vec<&Detection> = detections.iter().collect();
    ordered.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    ordered
        .iter()
        .map(|d| format!("{} ({:.2}) at {}", d.label, d.confidence, d.bbox))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs the detector on `frame` and formats what it finds.
pub fn annotate_detections(frame: &Frame, detector: &dyn DetectorClient, vocabulary: &[String]) -> Result<String> {
    let detections = detect_checked(detector, frame, vocabulary).map_err(|e| Error::Provider {
        subject: format!("detector on frame {}", frame.index),
        message: e.to_string(),
    })?;
    Ok(format_annotation(&detections))
}
