//! Instruction-tuning records in JSON-lines form.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::ClauseRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    None,
    Flip,
    Lowlight,
    Mask,
    Detect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaMeta {
    pub site: String,
    pub augmentation: Augmentation,
    pub source_video: String,
    pub start_ts: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lowlight_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// One image triplet with its system/user/assistant instruction triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub id: String,
    pub images: [String; 3],
    #[serde(rename = "system")]
    pub system_prompt: String,
    #[serde(rename = "user")]
    pub user_prompt: String,
    pub assistant: String,
    pub labels: BTreeMap<u32, bool>,
    pub meta: VqaMeta,
}

impl VqaRecord {
    pub fn validate(&self, registry: Option<&ClauseRegistry>) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("record {}: {msg}", self.id)));
        if self.id.trim().is_empty() {
            return Err(Error::Validation("record with an empty id".into()));
        }
        if self.images.iter().any(|i| i.trim().is_empty()) {
            return fail("empty image path".into());
        }
        if !(self.meta.start_ts.is_finite() && self.meta.start_ts >= 0.0) {
            return fail(format!("invalid start_ts {}", self.meta.start_ts));
        }
        if let Some(reg) = registry {
            if let Some(id) = self.labels.keys().find(|id| reg.get(**id).is_none()) {
                return fail(format!("label for unknown clause {id}"));
            }
        }
        let tag_ok = match self.meta.augmentation {
            Augmentation::Lowlight => self.meta.lowlight_factor.is_some(),
            Augmentation::Mask => self.meta.mask_fraction.is_some(),
            _ => true,
        };
        if !tag_ok {
            return fail("augmentation parameters missing from meta".into());
        }
        Ok(())
    }

    /// Ids labeled as violated.
    pub fn violated(&self) -> Vec<u32> {
        self.labels.iter().filter(|(_, v)| **v).map(|(k, _)| *k).collect()
    }

    /// The middle image, used as the key frame of the triplet.
    pub fn key_image(&self) -> &str {
        &self.images[1]
    }
}

/// Streams records to a JSON-lines sink.
pub struct VqaWriter<W: Write> {
    inner: W,
    written: usize,
}

impl<W: Write> VqaWriter<W> {
    pub fn new(inner: W) -> VqaWriter<W> {
        VqaWriter { inner, written: 0 }
    }

    pub fn write(&mut self, record: &VqaRecord) -> Result<()> {
        record.validate(None)?;
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Validation(format!("record {} is not serializable: {e}", record.id)))?;
        self.inner
            .write_all(line.as_bytes())
            .and_then(|_| self.inner.write_all(b"\n"))
            .map_err(|e| Error::io(format!("<record {}>", record.id), e))?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(|e| Error::io("<vqa output>", e))?;
        Ok(self.inner)
    }
}

/// Writes every record to `path`, returning the number of lines.
pub fn emit_vqa<'a>(path: impl AsRef<Path>, records: impl IntoIterator<Item = &'a VqaRecord>) -> Result<usize> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = VqaWriter::new(BufWriter::new(file));
    for r in records {
        writer.write(r)?;
    }
    let n = writer.written();
    writer.finish()?;
    Ok(n)
}

/// Lazily parses records from a JSON-lines reader.
pub fn vqa_reader<R: BufRead>(reader: R) -> impl Iterator<Item = Result<VqaRecord>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(Error::io(format!("<vqa line {}>", i + 1), e))),
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(crate::error::parse_json::<VqaRecord>(&l).map_err(|e| match e {
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
        })),
    })
}

pub fn read_vqa(path: impl AsRef<Path>) -> Result<Vec<VqaRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    vqa_reader(BufReader::new(file)).collect()
}
