//! Detector adapters: a remote open-vocabulary service and a replay stub.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::remote::{png_base64, JsonClient};
use crate::types::{Detection, Frame};

pub trait DetectorClient: Send + Sync {
    fn detect(&self, frame: &Frame, vocabulary: &[String]) -> Result<Vec<Detection>>;
}

/// Calls `detector` and checks every returned detection against the frame.
pub fn detect_checked(detector: &dyn DetectorClient, frame: &Frame, vocabulary: &[String]) -> Result<Vec<Detection>> {
    let detections = detector.detect(frame, vocabulary)?;
    for d in &detections {
        d.validate_for(frame.width(), frame.height()).map_err(|e| {
            Error::Contract(format!("detector returned an invalid detection for frame {}: {e}", frame.index))
        })?;
    }
    Ok(detections)
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image: String,
    classes: &'a [String],
}

#[derive(Deserialize)]
struct DetectResponse {
    detections: Vec<Detection>,
}

/// Remote detector speaking `POST {image, classes} -> {detections}`.
#[derive(Debug, Clone)]
pub struct HttpDetector {
    client: JsonClient,
}

impl HttpDetector {
    pub fn new(url: impl Into<String>, timeout: Duration) -> HttpDetector {
        HttpDetector {
            client: JsonClient::new(url, timeout),
        }
    }

    pub fn with_bearer(mut self, token: Option<String>) -> HttpDetector {
        self.client = self.client.with_bearer(token);
        self
    }
}

impl DetectorClient for HttpDetector {
    fn detect(&self, frame: &Frame, vocabulary: &[String]) -> Result<Vec<Detection>> {
        let body = DetectRequest {
            image: png_base64(&frame.image)?,
            classes: vocabulary,
        };
        let response: DetectResponse = self.client.post(&body)?;
        Ok(response.detections)
    }
}

/// One line of a detector fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureLine {
    #[serde(deserialize_with = "frame_key")]
    pub frame: String,
    pub detections: Vec<Detection>,
}

fn frame_key<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Key {
        Num(u64),
        Text(String),
    }
    Ok(match Key::deserialize(d)? {
        Key::Num(n) => n.to_string(),
        Key::Text(s) => s,
    })
}

/// Replays stored detections keyed by frame id. Frames without an entry have
/// no detections. The vocabulary is ignored.
#[derive(Debug, Clone, Default)]
pub struct FixtureDetector {
    by_frame: HashMap<String, Vec<Detection>>,
}

impl FixtureDetector {
    pub fn new(lines: impl IntoIterator<Item = FixtureLine>) -> FixtureDetector {
        let mut by_frame: HashMap<String, Vec<Detection>> = HashMap::new();
        for line in lines {
            by_frame.entry(line.frame).or_default().extend(line.detections);
        }
        FixtureDetector { by_frame }
    }

    pub fn from_jsonl(text: &str) -> Result<FixtureDetector> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: FixtureLine = crate::error::parse_json(raw).map_err(|e| match e {
                Error::Schema {
                    path,
                    column,
                    message,
                    ..
                } => Error::Schema {
                    path,
                    line: i + 1,
                    column,
                    message,
                },
                other => other,
            })?;
            for d in &line.detections {
                d.validate()?;
            }
            lines.push(line);
        }
        Ok(FixtureDetector::new(lines))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FixtureDetector> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FixtureDetector::from_jsonl(&text)
    }
}

impl DetectorClient for FixtureDetector {
    fn detect(&self, frame: &Frame, _vocabulary: &[String]) -> Result<Vec<Detection>> {
        Ok(self.by_frame.get(&frame.id()).cloned().unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BoundingBox;
    use image::RgbImage;

    fn frame(index: u64) -> Frame {
        Frame::new(index, 0.0, RgbImage::new(64, 48)).unwrap()
    }

    #[test]
    fn fixture_replays_by_frame_id() {
        let text = r#"{"frame": 60, "detections": [{"box": [10, 10, 20, 30], "label": "mobile phone", "confidence": 0.9}]}

{"frame": "61", "detections": []}"#;
        let det = FixtureDetector::from_jsonl(text).unwrap();
        let got = det.detect(&frame(60), &[]).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].label, "mobile phone");
        assert!(det.detect(&frame(0), &[]).unwrap().is_empty());
        assert!(det.detect(&frame(61), &[]).unwrap().is_empty());
    }

    #[test]
    fn fixture_schema_errors_carry_line() {
        let err = FixtureDetector::from_jsonl("{\"frame\": 1, \"detections\": []}\n{\"frame\": 2}").unwrap_err();
        match err {
            Error::Schema { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    struct OutOfBounds;

    impl DetectorClient for OutOfBounds {
        fn detect(&self, _frame: &Frame, _vocabulary: &[String]) -> Result<Vec<Detection>> {
            Ok(vec![Detection::new(BoundingBox::new(0, 0, 100, 10).unwrap(), "worker", 0.5).unwrap()])
        }
    }

    #[test]
    fn checked_detection_rejects_boxes_outside_frame() {
        assert!(matches!(
            detect_checked(&OutOfBounds, &frame(0), &[]),
            Err(Error::Contract(_))
        ));
    }
}
