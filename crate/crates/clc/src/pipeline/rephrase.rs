//! Pluggable paraphrase generation with a deterministic template default.
//!
//! Real corpora pair each repeat-inducing utterance with an LLM-written
//! rephrase; this artifact only needs the interface plus a default that
//! is total, deterministic, and never returns its input.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::metrics::normalize_text;

#[derive(Debug, Error, PartialEq)]
pub enum RephraseError {
    #[error("cannot rephrase empty text")]
    EmptyInput,
}

/// Produces a paraphrase of a user utterance.
pub trait Rephraser {
    /// Must return a non-identity paraphrase for any non-empty input.
    fn rephrase(&self, text: &str) -> Result<String, RephraseError>;
}

/// Prefix-rewrite templates tried in order; the first hit wins.
const TEMPLATES: &[(&str, &str)] = &[
    ("are there ", "is there any "),
    ("is there ", "are there "),
    ("can you ", "could you please "),
    ("could you ", "can you "),
    ("will you ", "would you "),
    ("turn on ", "switch on "),
    ("turn off ", "switch off "),
    ("what is ", "tell me what is "),
    ("where is ", "tell me where is "),
    ("i want to ", "i would like to "),
    ("play ", "please play "),
];

/// Deterministic rephraser: an exact-match mapping table first, then the
/// prefix templates, and as a last resort an "I meant: " prefix (which
/// is always a non-identity rewrite).
#[derive(Debug, Clone, Default)]
pub struct TemplateRephraser {
    /// Keys are matched on normalized text.
    mapping: BTreeMap<String, String>,
}

impl TemplateRephraser {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds caller-supplied exact rewrites consulted before templates.
    pub fn with_mapping<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mapping = pairs
            .into_iter()
            .map(|(k, v)| (normalize_text(&k.into()), v.into()))
            .collect();
        Self { mapping }
    }
}

impl Rephraser for TemplateRephraser {
    fn rephrase(&self, text: &str) -> Result<String, RephraseError> {
        if text.trim().is_empty() {
            return Err(RephraseError::EmptyInput);
        }
        let normalized = normalize_text(text);
        if let Some(mapped) = self.mapping.get(&normalized) {
            if mapped != text {
                return Ok(mapped.clone());
            }
        }
        for (prefix, replacement) in TEMPLATES {
            if let Some(rest) = normalized.strip_prefix(prefix) {
                let candidate = format!("{replacement}{rest}");
                if candidate != text {
                    return Ok(candidate);
                }
            }
        }
        Ok(format!("I meant: {text}"))
    }
}
