//! Dialogue data machinery: session construction from timestamped
//! interaction streams, repeat/rephrase detection over semantic
//! embeddings, synthetic error injection into clean conversations, and
//! deletion-based filtering of low-quality turns.

pub mod detect;
pub mod filter;
pub mod inject;
pub mod rephrase;
pub mod session;

pub use detect::detect_repeat_rephrase;
pub use filter::{filter_high_deletion, Partition, DEFAULT_DELETION_RATE_THRESHOLD};
pub use inject::inject_errors;
pub use rephrase::{RephraseError, Rephraser, TemplateRephraser};
pub use session::build_sessions;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("turn {turn_id} has no semantic embedding")]
    MissingEmbedding { turn_id: String },
    #[error("error-response pool is empty but an injection was selected")]
    EmptyErrorPool,
    #[error("user turn {turn_id} has no WER entry")]
    MissingWer { turn_id: String },
    #[error("invalid configuration: {context}")]
    InvalidConfig { context: String },
    #[error("event {event_id}: {context}")]
    InvalidEvent { event_id: String, context: String },
    #[error(transparent)]
    Rephrase(#[from] RephraseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

/// One decoded hypothesis for a turn, with its decoder score and an
/// optional reference to a semantic-embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<String>,
}

/// One timestamped utterance in an interaction stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub event_id: String,
    pub timestamp_s: f64,
    pub speaker: Speaker,
    pub transcript: String,
    /// Path to a frame-embedding file for this turn's audio, if any.
    pub embedding_ref: Option<String>,
    /// Top-K decoded hypotheses, best first. Empty when undecoded.
    pub hypotheses: Vec<Hypothesis>,
}

impl EventRecord {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.timestamp_s.is_finite() {
            return Err(PipelineError::InvalidEvent {
                event_id: self.event_id.clone(),
                context: format!("non-finite timestamp {}", self.timestamp_s),
            });
        }
        if self.speaker == Speaker::User && self.transcript.trim().is_empty() {
            return Err(PipelineError::InvalidEvent {
                event_id: self.event_id.clone(),
                context: "user turn with empty transcript".into(),
            });
        }
        Ok(())
    }

    /// The best-scoring hypothesis (ties go to the earlier entry).
    pub fn top_hypothesis(&self) -> Option<&Hypothesis> {
        let mut best: Option<&Hypothesis> = None;
        for h in &self.hypotheses {
            if best.is_none_or(|b| h.score > b.score) {
                best = Some(h);
            }
        }
        best
    }
}

/// An ordered group of turns closed under the final time-gap threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<EventRecord>,
    /// The gap threshold in force when the session closed.
    pub rho_final_s: f64,
}

impl Session {
    pub fn user_turns(&self) -> impl Iterator<Item = &EventRecord> {
        self.turns.iter().filter(|t| t.speaker == Speaker::User)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionBuilderConfig {
    /// Starting gap threshold in seconds.
    pub rho_initial_s: f64,
    /// The threshold never drops below this floor.
    pub rho_floor_s: f64,
    /// Hard cap on session size.
    pub max_utterances: usize,
}

impl Default for SessionBuilderConfig {
    fn default() -> Self {
        Self {
            rho_initial_s: 90.0,
            rho_floor_s: 15.0,
            max_utterances: 5,
        }
    }
}

impl SessionBuilderConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.rho_floor_s > 0.0 && self.rho_initial_s >= self.rho_floor_s) {
            return Err(PipelineError::InvalidConfig {
                context: format!(
                    "need 0 < rho_floor_s <= rho_initial_s, got floor {} initial {}",
                    self.rho_floor_s, self.rho_initial_s
                ),
            });
        }
        if self.max_utterances == 0 {
            return Err(PipelineError::InvalidConfig {
                context: "max_utterances must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    /// Turns with WER strictly above this make their conversation a
    /// candidate.
    pub wer_candidate_threshold: f64,
    /// Fraction of candidate conversations to modify (floored count).
    pub injection_rate: f64,
    /// Probability that an injection is a verbatim repeat rather than a
    /// rephrase.
    pub repeat_vs_rephrase_split: f64,
    pub rng_seed: u64,
    /// Non-specific agent error responses, consumed round-robin.
    pub error_response_pool: Vec<String>,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            wer_candidate_threshold: 0.15,
            injection_rate: 0.20,
            repeat_vs_rephrase_split: 0.5,
            rng_seed: 0,
            error_response_pool: vec![
                "I'm sorry, I don't understand.".to_string(),
                "Sorry, could you say that again?".to_string(),
                "I didn't catch that.".to_string(),
            ],
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fractions = [
            ("wer_candidate_threshold", self.wer_candidate_threshold),
            ("injection_rate", self.injection_rate),
            ("repeat_vs_rephrase_split", self.repeat_vs_rephrase_split),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::InvalidConfig {
                    context: format!("{name} must be in [0, 1], got {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Repeat,
    Rephrase,
}

/// Marks a turn as a repeat/rephrase of an earlier source turn; the
/// source is the turn that triggered it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RephraseLabel {
    pub turn_id: String,
    pub kind: LabelKind,
    pub source_turn_id: String,
}

#[cfg(test)]
pub(crate) fn user_event(id: &str, t: f64, transcript: &str) -> EventRecord {
    EventRecord {
        event_id: id.to_string(),
        timestamp_s: t,
        speaker: Speaker::User,
        transcript: transcript.to_string(),
        embedding_ref: None,
        hypotheses: Vec::new(),
    }
}

#[cfg(test)]
pub(crate) fn agent_event(id: &str, t: f64, transcript: &str) -> EventRecord {
    EventRecord {
        speaker: Speaker::Agent,
        ..user_event(id, t, transcript)
    }
}
