//! Image–clause relevance pairs for training the clause filter.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::PathBuf;

use serde::Deserialize;

use super::vqa::VqaRecord;
use crate::clause_filter::FilterSample;
use crate::error::{Error, Result};
use crate::registry::ClauseRegistry;
use crate::vlm::{with_retry, ChatBackend, ChatParams, ChatRequest};

/// Assigns a binary relevance label to every registry clause for a record's key frame.
pub trait Labeler: Send + Sync {
    fn labels_for(&self, record: &VqaRecord, registry: &ClauseRegistry) -> Result<BTreeMap<u32, bool>>;
}

/// Uses the labels stored on the record.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthLabeler {
    /// Treat clauses missing from a record as irrelevant instead of failing.
    pub missing_is_negative: bool,
}

impl Labeler for GroundTruthLabeler {
    fn labels_for(&self, record: &VqaRecord, registry: &ClauseRegistry) -> Result<BTreeMap<u32, bool>> {
        let mut out = BTreeMap::new();
        for clause in registry.clauses() {
            let label = match record.labels.get(&clause.id) {
                Some(&v) => v,
                None if self.missing_is_negative => false,
                None => {
                    return Err(Error::Validation(format!(
                        "record {} has no label for clause {}",
                        record.id, clause.id
                    )))
                }
            };
            out.insert(clause.id, label);
        }
        Ok(out)
    }
}

const JUDGE_SYSTEM: &str = "You label mining-site images for a safety regulation retriever. \
For each regulation below, decide whether it is relevant to the scene, meaning the scene contains the people, \
equipment or activity the regulation governs. Answer with a JSON array holding one object per regulation: \
[{\"clause_id\": <id>, \"relevant\": <true|false>}]";

const JUDGE_USER: &str = "Label every regulation for this image.";

/// Asks a chat backend for relevance labels, one request per key frame.
pub struct VlmJudgeLabeler<'a> {
    pub backend: &'a dyn ChatBackend,
    /// Directory that record image paths are relative to.
    pub image_root: PathBuf,
    pub params: ChatParams,
}

#[derive(Deserialize)]
struct Judgement {
    clause_id: u32,
    relevant: bool,
}

fn first_judgement_array(text: &str) -> Option<Vec<Judgement>> {
    text.match_indices('[').find_map(|(pos, _)| {
        serde_json::Deserializer::from_str(&text[pos..])
            .into_iter::<Vec<Judgement>>()
            .next()
            .and_then(|r| r.ok())
    })
}

impl Labeler for VlmJudgeLabeler<'_> {
    fn labels_for(&self, record: &VqaRecord, registry: &ClauseRegistry) -> Result<BTreeMap<u32, bool>> {
        let path = self.image_root.join(record.key_image());
        let image = image::open(&path)
            .map_err(|e| Error::Provider {
                subject: format!("image {}", path.display()),
                message: e.to_string(),
            })?
            .to_rgb8();
        let mut system = String::from(JUDGE_SYSTEM);
        system.push_str("\n\n");
        for c in registry.clauses() {
            system.push_str(&format!("[{}] {}\n", c.id, c.text));
        }
        let request = ChatRequest {
            system,
            user: JUDGE_USER.to_string(),
            images: vec![image],
            params: self.params,
        };
        let response = with_retry(|| self.backend.complete(&request))?;
        let judged = first_judgement_array(&response.text).ok_or_else(|| Error::Parse {
            raw: response.text.clone(),
        })?;
        let mut out: BTreeMap<u32, bool> = registry.ids().map(|id| (id, false)).collect();
        for j in judged {
            if let Some(slot) = out.get_mut(&j.clause_id) {
                *slot = j.relevant;
            }
        }
        Ok(out)
    }
}

/// Writes one pair per (key frame, clause). Records sharing a key frame are
/// labeled once. Returns the number of lines written.
pub fn emit_filter_pairs<'a, W: Write>(
    records: impl IntoIterator<Item = &'a VqaRecord>,
    labeler: &dyn Labeler,
    registry: &ClauseRegistry,
    mut out: W,
) -> Result<usize> {
    let mut seen = HashSet::new();
    let mut written = 0;
    for record in records {
        if !seen.insert(record.key_image().to_string()) {
            continue;
        }
        let labels = labeler.labels_for(record, registry)?;
        for (clause_id, relevant) in labels {
            let sample = FilterSample::new(record.key_image(), clause_id, relevant);
            serde_json::to_writer(&mut out, &sample)?;
            out.write_all(b"\n").map_err(|e| Error::io(format!("<pairs for {}>", record.id), e))?;
            written += 1;
        }
    }
    out.flush().map_err(|e| Error::io("<pairs output>", e))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::vqa::{Augmentation, VqaMeta};
    use crate::vlm::MockBackend;

    fn record(id: &str, key: &str, labels: &[(u32, bool)]) -> VqaRecord {
        VqaRecord {
            id: id.into(),
            images: ["a.png".into(), key.into(), "c.png".into()],
            system_prompt: String::new(),
            user_prompt: String::new(),
            assistant: String::new(),
            labels: labels.iter().copied().collect(),
            meta: VqaMeta {
                site: "s".into(),
                augmentation: Augmentation::None,
                source_video: "v".into(),
                start_ts: 0.0,
                lowlight_factor: None,
                mask_fraction: None,
                seed: None,
            },
        }
    }

    #[test]
    fn ground_truth_pairs_cover_registry() {
        let reg = ClauseRegistry::bundled();
        let records = vec![
            record("r1", "k1.png", &[(19, true)]),
            record("r1-flip", "k1.png", &[(19, true)]),
            record("r2", "k2.png", &[]),
        ];
        let mut buf = Vec::new();
        let labeler = GroundTruthLabeler {
            missing_is_negative: true,
        };
        let n = emit_filter_pairs(&records, &labeler, &reg, &mut buf).unwrap();
        assert_eq!(n, 80);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.contains("\"label\":1")).count(), 1);

        let strict = GroundTruthLabeler::default();
        let err = emit_filter_pairs(&records, &strict, &reg, Vec::new()).unwrap_err();
        assert!(err.to_string().contains("r1"));
    }

    #[test]
    fn judge_labels_from_backend() {
        let dir = tempfile::tempdir().unwrap();
        image::RgbImage::new(4, 4).save(dir.path().join("k.png")).unwrap();
        let mock = MockBackend::new(vec![]).with_default(r#"[{"clause_id": 2, "relevant": true}]"#);
        let judge = VlmJudgeLabeler {
            backend: &mock,
            image_root: dir.path().to_path_buf(),
            params: ChatParams::default(),
        };
        let reg = ClauseRegistry::synthetic(3).unwrap();
        let labels = judge.labels_for(&record("r", "k.png", &[]), &reg).unwrap();
        assert_eq!(labels, BTreeMap::from([(1, false), (2, true), (3, false)]));
    }
}
