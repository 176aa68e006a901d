//! JSON Lines turn manifests: one turn per line.
//!
//! The line schema is shared by every subcommand: `session_id`,
//! `turn_index`, `event_id`, `speaker`, `timestamp_s`, `transcript`,
//! `hyp_transcripts`, `wer`, `embedding_ref`, `labels`, `rho_final_s`.
//! Raw event streams may omit everything but `speaker`, `timestamp_s`,
//! and `transcript`; session-shaped outputs carry the rest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::pipeline::{EventRecord, Hypothesis, RephraseLabel, Session, Speaker};

use super::{file_error, resolve_ref, IoError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
    pub speaker: Speaker,
    pub timestamp_s: f64,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hyp_transcripts: Vec<Hypothesis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<RephraseLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_final_s: Option<f64>,
}

impl TurnRecord {
    /// Converts to a pipeline event; anonymous lines get a stable id
    /// derived from their line number.
    pub fn into_event(self, line_no: usize) -> EventRecord {
        EventRecord {
            event_id: self.event_id.unwrap_or_else(|| format!("e{line_no:05}")),
            timestamp_s: self.timestamp_s,
            speaker: self.speaker,
            transcript: self.transcript,
            embedding_ref: self.embedding_ref,
            hypotheses: self.hyp_transcripts,
        }
    }

    pub fn from_event(event: &EventRecord) -> Self {
        Self {
            session_id: None,
            turn_index: None,
            event_id: Some(event.event_id.clone()),
            speaker: event.speaker,
            timestamp_s: event.timestamp_s,
            transcript: event.transcript.clone(),
            hyp_transcripts: event.hypotheses.clone(),
            wer: None,
            embedding_ref: event.embedding_ref.clone(),
            labels: Vec::new(),
            rho_final_s: None,
        }
    }
}

/// Flattens sessions to turn records, attaching each label to the line
/// of the turn it marks.
pub fn session_turn_records(sessions: &[Session], labels: &[RephraseLabel]) -> Vec<TurnRecord> {
    let mut records = Vec::new();
    for session in sessions {
        for (turn_index, event) in session.turns.iter().enumerate() {
            let mut record = TurnRecord::from_event(event);
            record.session_id = Some(session.session_id.clone());
            record.turn_index = Some(turn_index);
            record.rho_final_s = session
                .rho_final_s
                .is_finite()
                .then_some(session.rho_final_s);
            record.labels = labels
                .iter()
                .filter(|l| l.turn_id == event.event_id)
                .cloned()
                .collect();
            records.push(record);
        }
    }
    records
}

/// Groups turn records back into sessions, preserving line order inside
/// each session. Records without a `session_id` all join a catch-all
/// session with the empty id; callers wanting real segmentation run the
/// session builder instead.
pub fn records_to_sessions(records: Vec<TurnRecord>) -> (Vec<Session>, Vec<RephraseLabel>) {
    let mut sessions: Vec<Session> = Vec::new();
    let mut labels = Vec::new();
    for (line_no, record) in records.into_iter().enumerate() {
        let session_id = record.session_id.clone().unwrap_or_default();
        let rho = record.rho_final_s.unwrap_or(f64::INFINITY);
        labels.extend(record.labels.clone());
        let event = record.into_event(line_no);
        match sessions.iter_mut().find(|s| s.session_id == session_id) {
            Some(session) => session.turns.push(event),
            None => sessions.push(Session {
                session_id,
                turns: vec![event],
                rho_final_s: rho,
            }),
        }
    }
    (sessions, labels)
}

/// Reads a manifest, one typed record per non-empty line. Lines are
/// consumed through a buffered reader, so only the decoded records are
/// held, never the raw file.
pub fn read_turns(path: &Path) -> Result<Vec<TurnRecord>, IoError> {
    use std::io::BufRead;
    let file = fs::File::open(path).map_err(|e| file_error(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| file_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TurnRecord = serde_json::from_str(&line).map_err(|e| IoError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Writes records as one JSON object per line.
pub fn write_turns(path: &Path, records: &[TurnRecord]) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(|e| file_error(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("records serialize");
        out.write_all(line.as_bytes())
            .map_err(|e| file_error(path, e))?;
        out.write_all(b"\n").map_err(|e| file_error(path, e))?;
    }
    out.flush().map_err(|e| file_error(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// One finding from [`validate_manifest`].
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn error(line: usize, field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            line,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }

    fn warning(line: usize, field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            line,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }
}

const KNOWN_FIELDS: [&str; 11] = [
    "session_id",
    "turn_index",
    "event_id",
    "speaker",
    "timestamp_s",
    "transcript",
    "hyp_transcripts",
    "wer",
    "embedding_ref",
    "labels",
    "rho_final_s",
];

/// Schema-checks a manifest line by line without aborting at the first
/// problem. Embedding references are opened and their headers verified;
/// frame-width disagreements across lines are flagged. The result is
/// empty for a well-formed manifest.
pub fn validate_manifest(path: &Path) -> Result<Vec<Diagnostic>, IoError> {
    use std::io::BufRead;
    let file = fs::File::open(path).map_err(|e| file_error(path, e))?;
    let mut diagnostics = Vec::new();
    let mut frame_width: Option<(usize, usize)> = None;

    for (idx, raw) in std::io::BufReader::new(file).lines().enumerate() {
        let raw = raw.map_err(|e| file_error(path, e))?;
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(&raw) {
            Ok(v) => v,
            Err(e) => {
                diagnostics.push(Diagnostic::error(line, None, format!("invalid JSON: {e}")));
                continue;
            }
        };
        let Some(object) = value.as_object() else {
            diagnostics.push(Diagnostic::error(line, None, "line is not a JSON object"));
            continue;
        };

        for key in object.keys() {
            if !KNOWN_FIELDS.contains(&key.as_str()) {
                diagnostics.push(Diagnostic::warning(line, Some(key), "unknown field"));
            }
        }

        let speaker = match object.get("speaker").and_then(Value::as_str) {
            Some(s @ ("user" | "agent")) => Some(s),
            Some(other) => {
                diagnostics.push(Diagnostic::error(
                    line,
                    Some("speaker"),
                    format!("must be \"user\" or \"agent\", got {other:?}"),
                ));
                None
            }
            None => {
                diagnostics.push(Diagnostic::error(
                    line,
                    Some("speaker"),
                    "missing or not a string",
                ));
                None
            }
        };

        match object.get("timestamp_s").and_then(Value::as_f64) {
            Some(t) if t.is_finite() => {}
            Some(t) => diagnostics.push(Diagnostic::error(
                line,
                Some("timestamp_s"),
                format!("must be finite, got {t}"),
            )),
            None => diagnostics.push(Diagnostic::error(
                line,
                Some("timestamp_s"),
                "missing or not a number",
            )),
        }

        match object.get("transcript").and_then(Value::as_str) {
            Some(t) => {
                if speaker == Some("user") && t.trim().is_empty() {
                    diagnostics.push(Diagnostic::error(
                        line,
                        Some("transcript"),
                        "user turns need a non-empty transcript",
                    ));
                }
            }
            None => diagnostics.push(Diagnostic::error(
                line,
                Some("transcript"),
                "missing or not a string",
            )),
        }

        if let Some(wer) = object.get("wer") {
            match wer.as_f64() {
                Some(w) if w >= 0.0 => {}
                _ => diagnostics.push(Diagnostic::error(
                    line,
                    Some("wer"),
                    "must be a non-negative number",
                )),
            }
        }

        if let Some(hyps) = object.get("hyp_transcripts") {
            match hyps.as_array() {
                Some(entries) => {
                    for (i, entry) in entries.iter().enumerate() {
                        let ok = entry.get("text").is_some_and(Value::is_string)
                            && entry.get("score").is_some_and(Value::is_number);
                        if !ok {
                            diagnostics.push(Diagnostic::error(
                                line,
                                Some("hyp_transcripts"),
                                format!("entry {i} needs string `text` and numeric `score`"),
                            ));
                        }
                    }
                }
                None => diagnostics.push(Diagnostic::error(
                    line,
                    Some("hyp_transcripts"),
                    "must be an array",
                )),
            }
        }

        if let Some(labels) = object.get("labels") {
            match labels.as_array() {
                Some(entries) => {
                    for (i, entry) in entries.iter().enumerate() {
                        let kind_ok = matches!(
                            entry.get("kind").and_then(Value::as_str),
                            Some("repeat" | "rephrase")
                        );
                        let ids_ok = entry.get("turn_id").is_some_and(Value::is_string)
                            && entry.get("source_turn_id").is_some_and(Value::is_string);
                        if !kind_ok || !ids_ok {
                            diagnostics.push(Diagnostic::error(
                                line,
                                Some("labels"),
                                format!("entry {i} needs turn_id, source_turn_id, and kind repeat|rephrase"),
                            ));
                        }
                    }
                }
                None => {
                    diagnostics.push(Diagnostic::error(line, Some("labels"), "must be an array"))
                }
            }
        }

        if let Some(reference) = object.get("embedding_ref").and_then(Value::as_str) {
            let target = resolve_ref(path, reference);
            match super::clce::read_matrix(&target) {
                Ok(matrix) => match frame_width {
                    Some((first_line, cols)) if cols != matrix.cols() => {
                        diagnostics.push(Diagnostic::warning(
                            line,
                            Some("embedding_ref"),
                            format!(
                                "frame width {} disagrees with width {cols} first seen on line {first_line}",
                                matrix.cols()
                            ),
                        ));
                    }
                    Some(_) => {}
                    None => frame_width = Some((line, matrix.cols())),
                },
                Err(e) => diagnostics.push(Diagnostic::error(
                    line,
                    Some("embedding_ref"),
                    format!("dimension mismatch or unreadable embedding: {e}"),
                )),
            }
        }
    }
    Ok(diagnostics)
}
