//! Uniform client abstraction for the vision and text model calls.
//!
//! A [`PerceptionClient`] wraps any [`ChatBackend`] with schema validation and
//! bounded re-prompting: when a reply fails validation, the request is retried
//! with the violation appended to the prompt, up to `max_retries` times. Every
//! payload handed back to callers has passed its schema.
//!
//! Backends: [`HttpBackend`] (chat-completion endpoint, records a cassette),
//! [`ReplayBackend`] (serves a recorded cassette offline), [`OracleBackend`]
//! (answers from ground-truth tables with seeded corruption, for simulator
//! runs), and [`ScriptedBackend`] (canned responses, for tests).

mod http;
mod oracle;
pub mod prompts;
mod scripted;

pub use http::{request_hash, HttpBackend, HttpClientConfig, ReplayBackend, TokenBucket};
pub use oracle::{CorruptionSpec, InjectedSwap, OracleBackend, OracleTables};
pub use scripted::{ScriptedBackend, UnavailableBackend};

use crate::keypoints::{Keypoint, Region};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("schema validation failed after {attempts} attempts: {violation}")]
    Schema {
        attempts: u32,
        violation: String,
        /// Raw text of the last failing reply, kept for audit.
        raw: String,
    },
    #[error("client unavailable: {reason}")]
    Unavailable {
        reason: String,
        raw: Option<String>,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// What a request asks the model to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "region-detect")]
    RegionDetect,
    #[serde(rename = "region-assign")]
    RegionAssign,
    #[serde(rename = "reconcile")]
    Reconcile,
    #[serde(rename = "caption")]
    Caption,
    #[serde(rename = "merge")]
    Merge,
}

impl TaskKind {
    /// Vision tasks must carry image attachments; the merge task is text-only.
    pub fn is_vision(self) -> bool {
        !matches!(self, TaskKind::Merge)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::RegionDetect => "region-detect",
            TaskKind::RegionAssign => "region-assign",
            TaskKind::Reconcile => "reconcile",
            TaskKind::Caption => "caption",
            TaskKind::Merge => "merge",
        }
    }
}

/// An image reference attached to a request. Paths may be logical (for
/// deterministic backends that answer from tables); the HTTP backend requires
/// them to exist so the bytes can be inlined.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttachmentRef {
    Image(PathBuf),
}

impl AttachmentRef {
    pub fn describe(&self) -> String {
        match self {
            AttachmentRef::Image(p) => p.display().to_string(),
        }
    }
}

/// Machine-readable request context. Deterministic backends answer from it;
/// live adapters ignore it entirely (the prompt text is self-contained).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub frame: Option<u64>,
    pub view: Option<String>,
    pub region: Option<Region>,
    pub animal: Option<String>,
    pub clip: Option<usize>,
    /// Clip ids covered by a merge request, in order.
    pub clip_ids: Option<Vec<usize>>,
}

/// Declared response shape, with enough context to validate semantics
/// (index ranges, injectivity, grouping structure) and not just JSON shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ResponseSchema {
    /// `{"x0": f, "y0": f, "x1": f, "y1": f}`
    RegionBox,
    /// `{"assignments": {"<keypoint>": <index|null>, ...}}` — exactly the
    /// requested keypoints, indices drawn from `valid_indices`, injective.
    Assignment {
        keypoints: Vec<Keypoint>,
        valid_indices: Vec<usize>,
    },
    /// `{"label": "...", "description": "..."}` — label non-empty, at most
    /// six words; description non-empty.
    Caption,
    /// `{"groups": [{"clips": [..], "label": "...", "description": "..."}]}`
    /// — groups of consecutive clip positions `0..clip_count`, disjoint,
    /// covering, in order.
    MergeGroups { clip_count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionRequest {
    pub task: TaskKind,
    pub prompt: String,
    pub attachments: Vec<AttachmentRef>,
    pub schema: ResponseSchema,
    /// Re-prompts allowed after the first attempt.
    pub max_retries: u32,
    pub meta: RequestMeta,
}

impl PerceptionRequest {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.task.is_vision() && self.attachments.is_empty() {
            return Err(ClientError::InvalidRequest(format!(
                "{} is a vision task and needs at least one attachment",
                self.task.name()
            )));
        }
        if !self.task.is_vision() && !self.attachments.is_empty() {
            return Err(ClientError::InvalidRequest(
                "merge is text-only and must not carry attachments".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PerceptionResponse {
    pub raw: String,
    /// Parsed payload; guaranteed to validate against the request schema.
    pub payload: Value,
    pub attempts: u32,
    pub latency: Duration,
}

/// The transport half of a client: turns one prompt into raw model text.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, query: &BackendQuery<'_>) -> Result<String, ClientError>;
    fn name(&self) -> &'static str;
}

// Shared-handle form, so callers can keep a handle on a backend (for its
// journal or counters) after the client takes ownership.
impl<B: ChatBackend> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, query: &BackendQuery<'_>) -> Result<String, ClientError> {
        (**self).complete(query)
    }

    fn name(&self) -> &'static str {
        (**self).name()
    }
}

pub struct BackendQuery<'a> {
    pub task: TaskKind,
    pub text: &'a str,
    pub attachments: &'a [AttachmentRef],
    pub schema: &'a ResponseSchema,
    pub meta: &'a RequestMeta,
}

/// Schema-validating client over any backend.
pub struct PerceptionClient {
    backend: Box<dyn ChatBackend>,
}

impl PerceptionClient {
    pub fn new(backend: Box<dyn ChatBackend>) -> Self {
        PerceptionClient { backend }
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    /// Sends the request, validating the reply against its schema. On a
    /// validation failure the model is re-prompted with the violation
    /// appended, up to `max_retries` times; transport failures propagate
    /// immediately.
    pub fn call(&self, request: &PerceptionRequest) -> Result<PerceptionResponse, ClientError> {
        request.validate()?;
        let started = std::time::Instant::now();
        let mut prompt = request.prompt.clone();
        let mut last_failure: Option<(String, String)> = None;
        let attempts_allowed = request.max_retries + 1;
        for attempt in 1..=attempts_allowed {
            let raw = self.backend.complete(&BackendQuery {
                task: request.task,
                text: &prompt,
                attachments: &request.attachments,
                schema: &request.schema,
                meta: &request.meta,
            })?;
            match validate_payload(&request.schema, &raw) {
                Ok(payload) => {
                    return Ok(PerceptionResponse {
                        raw,
                        payload,
                        attempts: attempt,
                        latency: started.elapsed(),
                    });
                }
                Err(violation) => {
                    prompt = format!(
                        "{}\n\nYour previous reply was rejected: {violation}. \
                         Reply again with JSON that follows the required schema exactly.",
                        request.prompt
                    );
                    last_failure = Some((violation, raw));
                }
            }
        }
        let (violation, raw) = last_failure.expect("at least one attempt was made");
        Err(ClientError::Schema {
            attempts: attempts_allowed,
            violation,
            raw,
        })
    }
}

/// Extracts the first balanced JSON object from model text, tolerating prose
/// or code fences around it.
pub fn extract_json(text: &str) -> Option<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(text.trim()) {
        return Some(v);
    }
    let bytes = text.as_bytes();
    let start = bytes.iter().position(|&b| b == b'{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return serde_json::from_str(&text[start..=i]).ok();
                }
            }
            _ => {}
        }
    }
    None
}

/// Validates raw model text against a schema, returning the parsed payload or
/// a human-readable violation suitable for a re-prompt.
pub fn validate_payload(schema: &ResponseSchema, raw: &str) -> Result<Value, String> {
    let value = extract_json(raw).ok_or_else(|| "reply contains no JSON object".to_string())?;
    match schema {
        ResponseSchema::RegionBox => validate_region_box(&value).map(|_| value),
        ResponseSchema::Assignment {
            keypoints,
            valid_indices,
        } => validate_assignment(&value, keypoints, valid_indices).map(|_| value),
        ResponseSchema::Caption => validate_caption(&value).map(|_| value),
        ResponseSchema::MergeGroups { clip_count } => {
            validate_merge_groups(&value, *clip_count).map(|_| value)
        }
    }
}

fn validate_region_box(value: &Value) -> Result<(), String> {
    let obj = value.as_object().ok_or("expected a JSON object")?;
    let mut coords = [0.0f64; 4];
    for (i, key) in ["x0", "y0", "x1", "y1"].iter().enumerate() {
        coords[i] = obj
            .get(*key)
            .and_then(Value::as_f64)
            .ok_or_else(|| format!("missing or non-numeric field `{key}`"))?;
        if !coords[i].is_finite() {
            return Err(format!("field `{key}` is not finite"));
        }
    }
    if coords[0] > coords[2] || coords[1] > coords[3] {
        return Err("box corners are inverted (x0 > x1 or y0 > y1)".into());
    }
    Ok(())
}

fn validate_assignment(
    value: &Value,
    keypoints: &[Keypoint],
    valid_indices: &[usize],
) -> Result<(), String> {
    let assignments = value
        .get("assignments")
        .and_then(Value::as_object)
        .ok_or("missing `assignments` object")?;
    let mut used = BTreeSet::new();
    for kp in keypoints {
        let entry = assignments
            .get(kp.name())
            .ok_or_else(|| format!("missing keypoint `{kp}`"))?;
        if entry.is_null() {
            continue;
        }
        let idx = entry
            .as_u64()
            .ok_or_else(|| format!("keypoint `{kp}` must map to an integer index or null"))?
            as usize;
        if !valid_indices.contains(&idx) {
            return Err(format!("keypoint `{kp}` uses unavailable centroid index {idx}"));
        }
        if !used.insert(idx) {
            return Err(format!(
                "centroid index {idx} assigned to two keypoints (duplicate)"
            ));
        }
    }
    for key in assignments.keys() {
        if !keypoints.iter().any(|kp| kp.name() == key) {
            return Err(format!("unexpected keypoint `{key}` in reply"));
        }
    }
    Ok(())
}

fn validate_caption(value: &Value) -> Result<(), String> {
    let label = value
        .get("label")
        .and_then(Value::as_str)
        .ok_or("missing string field `label`")?;
    if label.trim().is_empty() {
        return Err("label is empty".into());
    }
    if label.split_whitespace().count() > 6 {
        return Err("label exceeds six words".into());
    }
    let description = value
        .get("description")
        .and_then(Value::as_str)
        .ok_or("missing string field `description`")?;
    if description.trim().is_empty() {
        return Err("description is empty".into());
    }
    Ok(())
}

fn validate_merge_groups(value: &Value, clip_count: usize) -> Result<(), String> {
    let groups = value
        .get("groups")
        .and_then(Value::as_array)
        .ok_or("missing `groups` array")?;
    if groups.is_empty() {
        return Err("`groups` is empty".into());
    }
    let mut expected_next = 0usize;
    for (gi, group) in groups.iter().enumerate() {
        let clips = group
            .get("clips")
            .and_then(Value::as_array)
            .ok_or_else(|| format!("group {gi} missing `clips` array"))?;
        if clips.is_empty() {
            return Err(format!("group {gi} is empty"));
        }
        let ids: Vec<usize> = clips
            .iter()
            .map(|c| {
                c.as_u64()
                    .map(|v| v as usize)
                    .ok_or_else(|| format!("group {gi} holds a non-integer clip id"))
            })
            .collect::<Result<_, _>>()?;
        for (a, b) in ids.iter().zip(ids.iter().skip(1)) {
            if *b != *a + 1 {
                return Err(format!(
                    "group {gi} is not consecutive ({a} followed by {b})"
                ));
            }
        }
        if ids[0] != expected_next {
            if ids[0] < expected_next {
                return Err(format!(
                    "group {gi} overlaps the previous group (starts at {})",
                    ids[0]
                ));
            }
            return Err(format!(
                "gap before group {gi}: clip {expected_next} is not covered"
            ));
        }
        expected_next = ids[ids.len() - 1] + 1;
        if expected_next > clip_count {
            return Err(format!(
                "group {gi} references clip {} beyond the last clip {}",
                ids[ids.len() - 1],
                clip_count - 1
            ));
        }
        let label = group
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| format!("group {gi} missing string `label`"))?;
        if label.trim().is_empty() || label.split_whitespace().count() > 6 {
            return Err(format!("group {gi} label must be 1..=6 words"));
        }
        if group
            .get("description")
            .and_then(Value::as_str)
            .is_none_or(|d| d.trim().is_empty())
        {
            return Err(format!("group {gi} missing non-empty `description`"));
        }
    }
    if expected_next != clip_count {
        return Err(format!(
            "grouping does not cover all clips (stops at {expected_next} of {clip_count})"
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region_request(max_retries: u32) -> PerceptionRequest {
        PerceptionRequest {
            task: TaskKind::RegionDetect,
            prompt: "locate the ears".into(),
            attachments: vec![AttachmentRef::Image("synthetic://f0/cam0".into())],
            schema: ResponseSchema::RegionBox,
            max_retries,
            meta: RequestMeta::default(),
        }
    }

    #[test]
    fn scripted_malformed_then_valid_uses_two_attempts() {
        let backend = ScriptedBackend::new(vec![
            "not json at all",
            r#"{"x0": 1.0, "y0": 2.0, "x1": 3.0, "y1": 4.0}"#,
        ]);
        let client = PerceptionClient::new(Box::new(backend));
        let response = client.call(&region_request(2)).unwrap();
        assert_eq!(response.attempts, 2);
        assert_eq!(response.payload["x1"], 3.0);
    }

    #[test]
    fn retries_never_exceed_budget_and_raw_is_kept() {
        let backend = ScriptedBackend::new(vec!["bad", "still bad", "also bad", "never seen"]);
        let client = PerceptionClient::new(Box::new(backend));
        let err = client.call(&region_request(2)).unwrap_err();
        match err {
            ClientError::Schema { attempts, raw, .. } => {
                assert_eq!(attempts, 3);
                assert_eq!(raw, "also bad");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unavailable_propagates_immediately() {
        let client = PerceptionClient::new(Box::new(UnavailableBackend));
        assert!(matches!(
            client.call(&region_request(5)),
            Err(ClientError::Unavailable { .. })
        ));
    }

    #[test]
    fn vision_tasks_require_attachments() {
        let mut request = region_request(0);
        request.attachments.clear();
        let client = PerceptionClient::new(Box::new(UnavailableBackend));
        assert!(matches!(
            client.call(&request),
            Err(ClientError::InvalidRequest(_))
        ));
    }

    #[test]
    fn json_is_extracted_from_prose_and_fences() {
        let raw = "Sure! Here is the box:\n```json\n{\"x0\": 0.0, \"y0\": 0.0, \"x1\": 5.0, \"y1\": 5.0}\n```";
        let value = extract_json(raw).unwrap();
        assert_eq!(value["x1"], 5.0);
        assert!(extract_json("no object here").is_none());
        let nested = r#"prefix {"a": {"b": "with } brace"}} suffix"#;
        assert_eq!(extract_json(nested).unwrap()["a"]["b"], "with } brace");
    }

    #[test]
    fn assignment_schema_rejects_duplicates_and_bad_indices() {
        let schema = ResponseSchema::Assignment {
            keypoints: vec![Keypoint::EarL, Keypoint::EarR],
            valid_indices: vec![0, 1, 2],
        };
        let dup = r#"{"assignments": {"ear_L": 1, "ear_R": 1}}"#;
        assert!(validate_payload(&schema, dup).unwrap_err().contains("duplicate"));
        let bad = r#"{"assignments": {"ear_L": 9, "ear_R": null}}"#;
        assert!(validate_payload(&schema, bad).unwrap_err().contains("unavailable"));
        let missing = r#"{"assignments": {"ear_L": 1}}"#;
        assert!(validate_payload(&schema, missing).unwrap_err().contains("missing"));
        let ok = r#"{"assignments": {"ear_L": 1, "ear_R": null}}"#;
        assert!(validate_payload(&schema, ok).is_ok());
    }

    #[test]
    fn caption_schema_limits_label_length() {
        let schema = ResponseSchema::Caption;
        let long = r#"{"label": "one two three four five six seven", "description": "d"}"#;
        assert!(validate_payload(&schema, long).is_err());
        let ok = r#"{"label": "exploring", "description": "moves along the wall"}"#;
        assert!(validate_payload(&schema, ok).is_ok());
    }

    #[test]
    fn merge_schema_rejects_overlap_gap_and_nonconsecutive() {
        let schema = ResponseSchema::MergeGroups { clip_count: 4 };
        let overlap = r#"{"groups": [
            {"clips": [0,1], "label": "a", "description": "d"},
            {"clips": [1,2,3], "label": "b", "description": "d"}]}"#;
        assert!(validate_payload(&schema, overlap).unwrap_err().contains("overlap"));
        let gap = r#"{"groups": [
            {"clips": [0], "label": "a", "description": "d"},
            {"clips": [2,3], "label": "b", "description": "d"}]}"#;
        assert!(validate_payload(&schema, gap).unwrap_err().contains("gap"));
        let skip = r#"{"groups": [{"clips": [0,2], "label": "a", "description": "d"}]}"#;
        assert!(validate_payload(&schema, skip).unwrap_err().contains("consecutive"));
        let short = r#"{"groups": [{"clips": [0,1,2], "label": "a", "description": "d"}]}"#;
        assert!(validate_payload(&schema, short).unwrap_err().contains("cover"));
        let ok = r#"{"groups": [
            {"clips": [0,1], "label": "a", "description": "d"},
            {"clips": [2,3], "label": "b", "description": "d"}]}"#;
        assert!(validate_payload(&schema, ok).is_ok());
    }
}
