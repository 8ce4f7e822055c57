//! CSV and HTML rendering of objective reports.
//!
//! Output is a pure function of the report: identical input gives identical
//! bytes. CSV columns, in order:
//!
//! `patient_id, category, level, response_index, stimulus_label, answered_at,
//! period_start, period_end, required_correct, total_correct, total_errors, psi`
//!
//! one row per counted correct response; timestamps are ISO-8601 UTC.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::ObjectiveReport;

pub const REPORT_CSV_HEADER: [&str; 12] = [
    "patient_id",
    "category",
    "level",
    "response_index",
    "stimulus_label",
    "answered_at",
    "period_start",
    "period_end",
    "required_correct",
    "total_correct",
    "total_errors",
    "psi",
];

const HTML_TEMPLATE: &str = include_str!("../templates/objective_report.html");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Html,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unsupported report format {0:?}")]
pub struct UnsupportedFormat(pub String);

impl UnsupportedFormat {
    pub fn code(&self) -> &'static str {
        "UNSUPPORTED_FORMAT"
    }
}

impl FromStr for ReportFormat {
    type Err = UnsupportedFormat;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "html" => Ok(ReportFormat::Html),
            _ => Err(UnsupportedFormat(s.to_owned())),
        }
    }
}

impl ReportFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            ReportFormat::Csv => "text/csv; charset=utf-8",
            ReportFormat::Html => "text/html; charset=utf-8",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Html => "html",
        }
    }
}

fn psi_decimal(report: &ObjectiveReport) -> String {
    format!("{:.2}", report.totals.errors as f64 / f64::from(report.required_correct))
}

pub fn render_report(report: &ObjectiveReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Html => render_html(report).into_bytes(),
    }
}

fn render_csv(report: &ObjectiveReport) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    w.write_record(REPORT_CSV_HEADER).expect("writing to memory");
    let psi = psi_decimal(report);
    for (i, r) in report.correct_responses.iter().enumerate() {
        w.write_record([
            report.patient_id.to_string(),
            report.category.to_string(),
            report.level.to_string(),
            (i + 1).to_string(),
            r.stimulus_label.clone(),
            r.answered_at.to_iso8601(),
            report.period_start.to_iso8601(),
            report.period_end.to_iso8601(),
            report.required_correct.to_string(),
            report.totals.correct.to_string(),
            report.totals.errors.to_string(),
            psi.clone(),
        ])
        .expect("writing to memory");
    }
    w.into_inner().expect("in-memory writer never fails to flush")
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn render_html(report: &ObjectiveReport) -> String {
    let mut rows = String::new();
    for (i, r) in report.correct_responses.iter().enumerate() {
        let _ = writeln!(
            rows,
            "<tr><td>{}</td><td>{}</td><td>{}</td></tr>",
            i + 1,
            escape_html(&r.stimulus_label),
            r.answered_at.to_iso8601()
        );
    }
    let psi = format!(
        "{} ({} errors / {} required)",
        psi_decimal(report),
        report.totals.errors,
        report.required_correct
    );
    [
        ("{{patient_id}}", report.patient_id.to_string()),
        ("{{category}}", escape_html(report.category.as_str())),
        ("{{level}}", report.level.to_string()),
        ("{{period_start}}", report.period_start.to_iso8601()),
        ("{{period_end}}", report.period_end.to_iso8601()),
        ("{{total_correct}}", report.totals.correct.to_string()),
        ("{{required_correct}}", report.required_correct.to_string()),
        ("{{total_errors}}", report.totals.errors.to_string()),
        ("{{psi}}", psi),
        ("{{rows}}", rows),
    ]
    .iter()
    .fold(HTML_TEMPLATE.to_owned(), |html, (key, value)| html.replace(key, value))
}
