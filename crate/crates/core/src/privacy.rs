//! Checks that nothing identifying a child leaves or rests in the system.
//!
//! Two scans: a regex scan over arbitrary bytes (rendered reports, exports,
//! log files) for a configurable list of PII patterns, and a schema scan over
//! JSON records that only admits whitelisted field names.

use regex::Regex;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PiiFinding {
    pub pattern: String,
    pub matched: String,
}

#[derive(Debug, Clone)]
pub struct PiiScanner {
    patterns: Vec<(String, Regex)>,
}

/// Default pattern list: e-mail addresses, phone numbers, Italian fiscal
/// codes and field names that would carry personal data.
pub const DEFAULT_PII_PATTERNS: &[(&str, &str)] = &[
    ("email", r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}"),
    ("phone", r"\+\d{1,3}[\s-]?\d{2,4}[\s-]?\d{3,4}[\s-]?\d{3,4}"),
    ("fiscal_code", r"\b[A-Z]{6}\d{2}[A-EHLMPR-T]\d{2}[A-Z]\d{3}[A-Z]\b"),
    (
        "personal_field",
        r"(?i)\b(first_?name|last_?name|full_?name|surname|birth_?date|date of birth|dob|home_?address|e-?mail|phone_?number|fiscal_?code|guardian)\b",
    ),
];

impl Default for PiiScanner {
    fn default() -> Self {
        PiiScanner::new(DEFAULT_PII_PATTERNS.iter().map(|(n, p)| (n.to_string(), p.to_string())))
            .expect("built-in patterns compile")
    }
}

impl PiiScanner {
    pub fn new(patterns: impl IntoIterator<Item = (String, String)>) -> Result<Self, regex::Error> {
        let patterns = patterns
            .into_iter()
            .map(|(name, p)| Ok((name, Regex::new(&p)?)))
            .collect::<Result<_, regex::Error>>()?;
        Ok(PiiScanner { patterns })
    }

    pub fn scan(&self, bytes: &[u8]) -> Vec<PiiFinding> {
        let text = String::from_utf8_lossy(bytes);
        let mut out = Vec::new();
        for (name, re) in &self.patterns {
            for m in re.find_iter(&text) {
                out.push(PiiFinding { pattern: name.clone(), matched: m.as_str().to_owned() });
            }
        }
        out
    }
}

/// Field names allowed in persisted records, API bodies and reports.
pub const FIELD_WHITELIST: &[&str] = &[
    // events
    "seq", "session_id", "timestamp", "kind", "payload", "patient_id", "therapist_id",
    "trial_id", "objective", "category", "level", "game_type", "required_correct",
    "target", "distractors", "id", "label", "image_ref", "outcome", "selected",
    "latency_ms", "mastered", "auto_ended",
    // progress
    "per_category", "current_level", "correct_count_at_level", "mastered_stimuli",
    "level_correct_targets",
    // reports
    "period_start", "period_end", "correct_responses", "stimulus_label", "answered_at",
    "totals", "correct", "errors", "psi", "psi_exact", "required",
    // audit
    "at", "principal_kind", "subject_id", "action", "endpoint", "reason", "request_id",
];

/// Fields whose value is a map keyed by data (opaque ids), not by schema.
pub const MAP_FIELDS: &[&str] = &["per_category", "mastered_stimuli"];

fn opaque_key(k: &str) -> bool {
    !k.is_empty()
        && k.len() <= 128
        && k.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b':'))
}

/// Returns the JSON paths of every field that is not whitelisted.
pub fn non_whitelisted_fields(value: &Value) -> Vec<String> {
    let mut out = Vec::new();
    walk(value, "$", false, &mut out);
    out
}

fn walk(value: &Value, path: &str, data_keys: bool, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let child = format!("{path}.{k}");
                if data_keys {
                    if !opaque_key(k) {
                        out.push(child.clone());
                    }
                    walk(v, &child, false, out);
                } else {
                    if !FIELD_WHITELIST.contains(&k.as_str()) {
                        out.push(child.clone());
                    }
                    walk(v, &child, MAP_FIELDS.contains(&k.as_str()), out);
                }
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                walk(v, &format!("{path}[{i}]"), false, out);
            }
        }
        _ => {}
    }
}
