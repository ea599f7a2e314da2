//! Clause registry: the numbered regulation set offered to the filter and the VLM.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{parse_json, Error, Result};
use crate::types::{Category, Clause};

const BUNDLED: &str = include_str!("../data/clauses.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryFile {
    version: String,
    clauses: Vec<Clause>,
}

/// An ordered, validated set of clauses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClauseRegistry {
    version: String,
    clauses: Vec<Clause>,
    by_id: HashMap<u32, usize>,
}

impl ClauseRegistry {
    pub fn new(version: impl Into<String>, clauses: Vec<Clause>) -> Result<ClauseRegistry> {
        let version = version.into();
        if version.trim().is_empty() {
            return Err(Error::Validation("registry version is empty".into()));
        }
        if clauses.is_empty() {
            return Err(Error::Validation("registry declares no clauses".into()));
        }
        let mut by_id = HashMap::with_capacity(clauses.len());
        let mut prev: Option<u32> = None;
        for (pos, clause) in clauses.iter().enumerate() {
            if clause.id == 0 {
                return Err(Error::Validation(format!("clause at position {pos} has id 0")));
            }
            if clause.text.trim().is_empty() {
                return Err(Error::Validation(format!("clause {} has empty text", clause.id)));
            }
            if by_id.insert(clause.id, pos).is_some() {
                return Err(Error::Validation(format!("duplicate clause id {}", clause.id)));
            }
            if let Some(p) = prev {
                if clause.id <= p {
                    return Err(Error::Validation(format!(
                        "clause ids must be strictly increasing ({} after {p})",
                        clause.id
                    )));
                }
            }
            prev = Some(clause.id);
        }
        Ok(ClauseRegistry {
            version,
            clauses,
            by_id,
        })
    }

    /// The 40-clause mining registry shipped with the crate.
    pub fn bundled() -> ClauseRegistry {
        ClauseRegistry::from_json_str(BUNDLED).expect("bundled registry is valid")
    }

    pub fn from_json_str(text: &str) -> Result<ClauseRegistry> {
        let file: RegistryFile = parse_json(text)?;
        ClauseRegistry::new(file.version, file.clauses)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ClauseRegistry> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ClauseRegistry::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&RegistryFile {
            version: self.version.clone(),
            clauses: self.clauses.clone(),
        })?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn len(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Clause> {
        self.by_id.get(&id).map(|&i| &self.clauses[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.clauses.iter().map(|c| c.id)
    }

    /// Resolves ids in the given order; unknown ids are an error.
    pub fn select(&self, ids: &[u32]) -> Result<Vec<Clause>> {
        ids.iter()
            .map(|&id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::Validation(format!("clause {id} not in registry {}", self.version)))
            })
            .collect()
    }

    /// A registry of `count` clauses whose texts all have the same length.
    ///
    /// Texts reuse the bundled regulations, padded or truncated to a fixed width,
    /// so that prompt cost depends only on how many clauses are offered.
    pub fn synthetic(count: usize) -> Result<ClauseRegistry> {
        const WIDTH: usize = 72;
        if count == 0 {
            return Err(Error::Validation("synthetic registry needs at least one clause".into()));
        }
        let base = ClauseRegistry::bundled();
        let clauses = (0..count)
            .map(|i| {
                let src = &base.clauses[i % base.len()];
                let mut text: String = format!("Site rule {:04}: {}", i + 1, src.text)
                    .chars()
                    .take(WIDTH)
                    .collect();
                while text.chars().count() < WIDTH {
                    text.push('.');
                }
                Clause {
                    id: i as u32 + 1,
                    category: src.category,
                    text,
                }
            })
            .collect();
        ClauseRegistry::new(format!("synthetic-{count}"), clauses)
    }

    pub fn count_by_category(&self, category: Category) -> usize {
        self.clauses.iter().filter(|c| c.category == category).count()
    }
}

impl Serialize for ClauseRegistry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct View<'a> {
            version: &'a str,
            clauses: &'a [Clause],
        }
        View {
            version: &self.version,
            clauses: &self.clauses,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClauseRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = RegistryFile::deserialize(d)?;
        ClauseRegistry::new(file.version, file.clauses).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_has_forty_appendix_clauses() {
        let reg = ClauseRegistry::bundled();
        assert_eq!(reg.len(), 40);
        assert_eq!(reg.ids().collect::<Vec<_>>(), (1..=40).collect::<Vec<_>>());
        assert!(reg.get(16).unwrap().text.contains("Not wearing safety helmets"));
        assert_eq!(reg.get(19).unwrap().text, "Using mobile phones in work zones");
        assert_eq!(reg.get(28).unwrap().category, Category::ToolsEquipment);
        let total: usize = Category::ALL.iter().map(|&c| reg.count_by_category(c)).sum();
        assert_eq!(total, 40);
    }

    #[test]
    fn empty_clause_list_is_rejected() {
        let err = ClauseRegistry::from_json_str(r#"{"version":"v","clauses":[]}"#).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = r#"{"version":"v","clauses":[
            {"id":1,"category":"PPE","text":"a"},
            {"id":1,"category":"PPE","text":"b"}]}"#;
        let err = ClauseRegistry::from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("duplicate clause id 1"), "{err}");
    }

    #[test]
    fn schema_errors_name_the_field() {
        let text = "{\"version\":\"v\",\n\"clauses\":[{\"id\":1,\"category\":\"Weather\",\"text\":\"a\"}]}";
        match ClauseRegistry::from_json_str(text).unwrap_err() {
            Error::Schema { path, line, .. } => {
                assert_eq!(path, "clauses[0].category");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let reg = ClauseRegistry::bundled();
        let again = ClauseRegistry::from_json_str(&reg.to_json_string().unwrap()).unwrap();
        assert_eq!(reg, again);
    }

    #[test]
    fn synthetic_texts_have_uniform_width() {
        let reg = ClauseRegistry::synthetic(400).unwrap();
        assert_eq!(reg.len(), 400);
        let widths: std::collections::BTreeSet<_> = reg.clauses().iter().map(|c| c.text.chars().count()).collect();
        assert_eq!(widths.len(), 1);
    }
}
