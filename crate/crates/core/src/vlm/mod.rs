//! Prompting a vision-language model over the filtered clauses and reading
//! its clause-by-clause verdicts back.

mod backend;

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use backend::{ChatBackend, ChatParams, ChatRequest, ChatResponse, CostModel, HttpChatBackend, MockBackend, MockRule};

use crate::error::{Error, Result};
use crate::types::{Clause, ClauseVerdict, FrameTriplet};

pub const AUX_HEADER: &str = "Auxiliary detections:";
pub const NOT_ADDRESSED: &str = "not addressed by model";

const SYSTEM_ROLE: &str = "You are a safety supervisor reviewing surveillance footage from a mining site. \
You receive three frames captured one second apart, in temporal order. \
Decide for each regulation listed below whether the frames show a worker violating it.";

const SYSTEM_FORMAT: &str = "Think step by step about what each worker is doing, then finish with a JSON array \
holding exactly one object per regulation listed above, in this form:
[{\"clause_id\": <id>, \"violated\": <true|false>, \"reasoning\": \"<one sentence>\"}]";

const USER_BASE: &str = "Analyze the three frames. Describe the workers' actions, their protective equipment \
and any tools or machinery in use, then give your clause-by-clause verdict.";

/// Role statement, one `[id] text` line per clause, then the answer format.
pub fn build_system_prompt(clauses: &[Clause]) -> Result<String> {
    if clauses.is_empty() {
        return Err(Error::Validation("cannot build a prompt without clauses".into()));
    }
    let mut out = String::with_capacity(SYSTEM_ROLE.len() + SYSTEM_FORMAT.len() + clauses.len() * 64);
    out.push_str(SYSTEM_ROLE);
    out.push_str("\n\nRegulations:\n");
    for c in clauses {
        out.push_str(&format!("[{}] {}\n", c.id, c.text));
    }
    out.push('\n');
    out.push_str(SYSTEM_FORMAT);
    Ok(out)
}

/// The fixed analysis request, with detections appended when given.
pub fn build_user_prompt(annotation: Option<&str>) -> String {
    match annotation {
        None => USER_BASE.to_string(),
        Some(block) => format!("{USER_BASE}\n\n{AUX_HEADER}\n{block}"),
    }
}

#[derive(Deserialize)]
struct RawVerdict {
    clause_id: u32,
    violated: bool,
    #[serde(default)]
    reasoning: String,
}

/// The first `[` that starts a parseable verdict array, if any.
fn first_verdict_array(text: &str) -> Option<Vec<RawVerdict>> {
    for (pos, _) in text.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Vec<RawVerdict>>();
        if let Some(Ok(verdicts)) = stream.next() {
            return Some(verdicts);
        }
    }
    None
}

fn fallback_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        Regex::new(r"(?i)clause\s*\[?(\d+)\]?\s*:\s*(violation|compliant)").expect("static regex")
    })
}

/// Reads verdicts for exactly the `offered` ids, in offered order.
///
/// A JSON verdict array is preferred. Failing that, lines of the form
/// `clause <id>: violation|compliant` are used. Offered ids the model never
/// mentions come back as compliant.
pub fn parse_verdicts(text: &str, offered: &[u32]) -> Result<Vec<ClauseVerdict>> {
    if offered.is_empty() {
        return Err(Error::Validation("no clauses were offered".into()));
    }
    let mut found: HashMap<u32, (bool, String)> = HashMap::new();
    if let Some(raw) = first_verdict_array(text) {
        for v in raw {
            found.entry(v.clause_id).or_insert((v.violated, v.reasoning));
        }
    } else {
        let mut any = false;
        for line in text.lines() {
            if let Some(caps) = fallback_pattern().captures(line) {
                any = true;
                let Ok(id) = caps[1].parse::<u32>() else { continue };
                let violated = caps[2].eq_ignore_ascii_case("violation");
                found.entry(id).or_insert((violated, line.trim().to_string()));
            }
        }
        if !any {
            return Err(Error::Parse { raw: text.to_string() });
        }
    }
    Ok(offered
        .iter()
        .map(|&id| match found.remove(&id) {
            Some((violated, reasoning)) => ClauseVerdict {
                clause_id: id,
                violated,
                reasoning,
            },
            None => ClauseVerdict {
                clause_id: id,
                violated: false,
                reasoning: NOT_ADDRESSED.to_string(),
            },
        })
        .collect())
}

/// The outcome of one triplet analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub video_id: String,
    pub start_ts: f64,
    pub verdicts: Vec<ClauseVerdict>,
    pub raw_text: String,
    pub latency_s: f64,
    pub clauses_offered: Vec<u32>,
}

/// Runs `call` and retries once when the failure is transient.
pub fn with_retry<T>(mut call: impl FnMut() -> Result<T>) -> Result<T> {
    match call() {
        Err(Error::Backend { kind, .. }) if kind.is_retryable() => call(),
        other => other,
    }
}

/// Sends the triplet and the offered clauses to the backend and parses the reply.
pub fn analyze_triplet(
    triplet: &FrameTriplet,
    clauses: &[Clause],
    backend: &dyn ChatBackend,
    annotation: Option<&str>,
    params: ChatParams,
) -> Result<AnalysisResult> {
    let request = ChatRequest {
        system: build_system_prompt(clauses)?,
        user: build_user_prompt(annotation),
        images: triplet.frames().iter().map(|f| f.image.clone()).collect(),
        params,
    };
    let response = with_retry(|| backend.complete(&request))?;
    let offered: Vec<u32> = clauses.iter().map(|c| c.id).collect();
    let verdicts = parse_verdicts(&response.text, &offered)?;
    Ok(AnalysisResult {
        video_id: triplet.video_id.clone(),
        start_ts: triplet.start_ts(),
        verdicts,
        raw_text: response.text,
        latency_s: response.latency_s.max(0.0),
        clauses_offered: offered,
    })
}
