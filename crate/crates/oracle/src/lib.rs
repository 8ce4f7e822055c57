//! Brute-force reference for session metrics.
//!
//! Works from raw JSON event logs or from exported CSV tables and shares no
//! code with the engine: every figure is a linear scan over flat rows.
//! Ratios are kept exact as `(numerator, denominator)` pairs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRow {
    pub session: String,
    pub patient: u64,
    pub started_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerRow {
    pub session: String,
    pub patient: u64,
    pub seq: u64,
    pub category: String,
    pub level: u64,
    pub required: u64,
    pub outcome: String,
    pub target_label: String,
    pub at_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRow {
    pub session: String,
    pub patient: u64,
    pub seq: u64,
    pub category: String,
    pub level: u64,
    pub at_ms: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tables {
    pub sessions: Vec<SessionRow>,
    pub answers: Vec<AnswerRow>,
    pub completions: Vec<CompletionRow>,
}

pub fn parse_time(s: &str) -> i64 {
    chrono::DateTime::parse_from_rfc3339(s)
        .unwrap_or_else(|e| panic!("bad timestamp {s:?}: {e}"))
        .timestamp_millis()
}

/// Parses JSON lines, skipping a final line without a terminator.
pub fn parse_jsonl(text: &str) -> Vec<Value> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    lines.pop();
    lines
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("valid JSON line"))
        .collect()
}

fn s(v: &Value, key: &str) -> String {
    v[key].as_str().unwrap_or_else(|| panic!("missing string {key} in {v}")).to_owned()
}

fn n(v: &Value, key: &str) -> u64 {
    v[key].as_u64().unwrap_or_else(|| panic!("missing number {key} in {v}"))
}

impl Tables {
    pub fn from_logs(logs: &[Vec<Value>]) -> Tables {
        let mut t = Tables::default();
        for log in logs {
            let Some(first) = log.first() else { continue };
            assert_eq!(s(first, "kind"), "SESSION_STARTED");
            let session = s(first, "session_id");
            let patient = n(&first["payload"], "patient_id");
            t.sessions.push(SessionRow {
                session: session.clone(),
                patient,
                started_ms: parse_time(&s(first, "timestamp")),
            });
            let mut trials: HashMap<String, &Value> = HashMap::new();
            for e in log {
                let p = &e["payload"];
                match s(e, "kind").as_str() {
                    "TRIAL_PRESENTED" => {
                        trials.insert(s(p, "trial_id"), p);
                    }
                    "ANSWER_RECORDED" => {
                        let trial = trials[&s(p, "trial_id")];
                        t.answers.push(AnswerRow {
                            session: session.clone(),
                            patient,
                            seq: n(e, "seq"),
                            category: s(&trial["objective"], "category"),
                            level: n(&trial["objective"], "level"),
                            required: n(trial, "required_correct"),
                            outcome: s(p, "outcome"),
                            target_label: s(&trial["target"], "label"),
                            at_ms: parse_time(&s(e, "timestamp")),
                        });
                    }
                    "OBJECTIVE_COMPLETED" => t.completions.push(CompletionRow {
                        session: session.clone(),
                        patient,
                        seq: n(e, "seq"),
                        category: s(&p["objective"], "category"),
                        level: n(&p["objective"], "level"),
                        at_ms: parse_time(&s(e, "timestamp")),
                    }),
                    _ => {}
                }
            }
        }
        t
    }

    pub fn from_jsonl(texts: &[String]) -> Tables {
        let logs: Vec<Vec<Value>> = texts.iter().map(|t| parse_jsonl(t)).collect();
        Tables::from_logs(&logs)
    }

    /// Reads the `sessions`, `answers` and `completions` CSV exports.
    pub fn from_csv(sessions: &[u8], answers: &[u8], completions: &[u8]) -> Tables {
        fn rows(bytes: &[u8]) -> Vec<HashMap<String, String>> {
            let mut r = csv::Reader::from_reader(bytes);
            let header: Vec<String> = r.headers().expect("header row").iter().map(str::to_owned).collect();
            r.records()
                .map(|rec| header.iter().cloned().zip(rec.expect("csv row").iter().map(str::to_owned)).collect())
                .collect()
        }
        let num = |m: &HashMap<String, String>, k: &str| -> u64 { m[k].parse().expect("integer column") };
        Tables {
            sessions: rows(sessions)
                .iter()
                .map(|m| SessionRow {
                    session: m["session_id"].clone(),
                    patient: num(m, "patient_id"),
                    started_ms: parse_time(&m["started_at"]),
                })
                .collect(),
            answers: rows(answers)
                .iter()
                .map(|m| AnswerRow {
                    session: m["session_id"].clone(),
                    patient: num(m, "patient_id"),
                    seq: num(m, "seq"),
                    category: m["category"].clone(),
                    level: num(m, "level"),
                    required: num(m, "required_correct"),
                    outcome: m["outcome"].clone(),
                    target_label: m["target_label"].clone(),
                    at_ms: parse_time(&m["answered_at"]),
                })
                .collect(),
            completions: rows(completions)
                .iter()
                .map(|m| CompletionRow {
                    session: m["session_id"].clone(),
                    patient: num(m, "patient_id"),
                    seq: num(m, "seq"),
                    category: m["category"].clone(),
                    level: num(m, "level"),
                    at_ms: parse_time(&m["completed_at"]),
                })
                .collect(),
        }
    }

    pub fn patients(&self) -> BTreeSet<u64> {
        self.sessions.iter().map(|s| s.patient).collect()
    }
}

fn is_error(outcome: &str) -> bool {
    outcome == "INCORRECT" || outcome == "NO_RESPONSE"
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reduced fraction.
pub fn reduce(num: u128, den: u128) -> (u128, u128) {
    let g = gcd(num, den).max(1);
    (num / g, den / g)
}

/// `(errors, required)` for one objective, `None` without answers.
pub fn errors_at(t: &Tables, patient: u64, category: &str, level: u64) -> Option<(u64, u64)> {
    let mut found = None;
    for a in &t.answers {
        if a.patient == patient && a.category == category && a.level == level {
            let e = found.get_or_insert((0, a.required));
            if is_error(&a.outcome) {
                e.0 += 1;
            }
        }
    }
    found
}

pub fn correct_at(t: &Tables, patient: u64, category: &str, level: u64) -> u64 {
    t.answers
        .iter()
        .filter(|a| a.patient == patient && a.category == category && a.level == level && a.outcome == "CORRECT")
        .count() as u64
}

/// Last answer minus first answer, in ms.
pub fn engagement_ms(t: &Tables, session: &str) -> Option<i64> {
    let times: Vec<i64> = t.answers.iter().filter(|a| a.session == session).map(|a| a.at_ms).collect();
    let lo = times.iter().min()?;
    let hi = times.iter().max()?;
    Some(hi - lo)
}

/// Completions per patient and category with `from <= at < to`; every
/// requested patient and category appears.
pub fn completion_counts(
    t: &Tables,
    patients: &BTreeSet<u64>,
    from_ms: i64,
    to_ms: i64,
    categories: &BTreeSet<String>,
) -> BTreeMap<u64, BTreeMap<String, u64>> {
    let mut out = BTreeMap::new();
    for p in patients {
        let mut per = BTreeMap::new();
        for c in categories {
            let count = t
                .completions
                .iter()
                .filter(|x| x.patient == *p && x.category == *c && x.at_ms >= from_ms && x.at_ms < to_ms)
                .count();
            per.insert(c.clone(), count as u64);
        }
        out.insert(*p, per);
    }
    out
}

/// Per-patient mean ψ over completed levels of a category, exact.
pub fn patient_psi(t: &Tables, category: &str) -> BTreeMap<u64, (u128, u128)> {
    let mut levels: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for c in t.completions.iter().filter(|c| c.category == category) {
        levels.entry(c.patient).or_default().insert(c.level);
    }
    let mut out = BTreeMap::new();
    for (patient, done) in levels {
        let (mut num, mut den) = (0u128, 1u128);
        let mut k = 0u128;
        for level in done {
            if let Some((e, r)) = errors_at(t, patient, category, level) {
                // num/den + e/r
                num = num * u128::from(r) + u128::from(e) * den;
                den *= u128::from(r);
                (num, den) = reduce(num, den);
                k += 1;
            }
        }
        if k > 0 {
            out.insert(patient, reduce(num, den * k));
        }
    }
    out
}

pub fn to_f64((num, den): (u128, u128)) -> f64 {
    num as f64 / den as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sem: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Textbook definitions: sample standard deviation (n − 1) over √n, 0 for n = 1.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let count = values.len() as f64;
    let mut total = 0.0;
    for v in values {
        total += v;
    }
    let mean = total / count;
    let mut squares = 0.0;
    for v in values {
        squares += (v - mean) * (v - mean);
    }
    let sem = if values.len() > 1 { (squares / (count - 1.0) / count).sqrt() } else { 0.0 };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(Summary { mean, sem, min: sorted[0], max: sorted[sorted.len() - 1], n: values.len() })
}

pub fn category_summary(t: &Tables, category: &str) -> Option<Summary> {
    let values: Vec<f64> = patient_psi(t, category).into_values().map(to_f64).collect();
    summarize(&values)
}

/// Correct answers that counted toward a completed level, in order, as
/// `(label, at_ms)`. `None` if the level was never completed.
pub fn report_responses(t: &Tables, patient: u64, category: &str, level: u64) -> Option<Vec<(String, i64)>> {
    let start: HashMap<&str, i64> = t.sessions.iter().map(|s| (s.session.as_str(), s.started_ms)).collect();
    let key = |session: &str, seq: u64| (start[session], session.to_owned(), seq);
    let done = t
        .completions
        .iter()
        .filter(|c| c.patient == patient && c.category == category && c.level == level)
        .map(|c| key(&c.session, c.seq))
        .min()?;
    let mut hits: Vec<_> = t
        .answers
        .iter()
        .filter(|a| {
            a.patient == patient
                && a.category == category
                && a.level == level
                && a.outcome == "CORRECT"
                && key(&a.session, a.seq) < done
        })
        .map(|a| (key(&a.session, a.seq), a.target_label.clone(), a.at_ms))
        .collect();
    hits.sort();
    Some(hits.into_iter().map(|(_, l, at)| (l, at)).collect())
}
