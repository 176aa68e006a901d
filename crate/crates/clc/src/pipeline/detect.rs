//! Repeat/rephrase detection via semantic vector matching.

use std::collections::HashMap;

use crate::metrics::normalize_text;
use crate::tensor::{dot, l2_normalize, Vector};

use super::{LabelKind, PipelineError, RephraseLabel, Session, Speaker};

/// Cosine similarity, clamped into `[-1, 1]`. Bit-identical inputs
/// short-circuit to exactly 1 so a verbatim copy of an embedding always
/// clears any threshold.
fn cosine(a: &Vector, b: &Vector) -> Result<f64, PipelineError> {
    if a == b {
        return Ok(1.0);
    }
    let ua = l2_normalize(a)?;
    let ub = l2_normalize(b)?;
    Ok(dot(&ua, &ub)?.clamp(-1.0, 1.0))
}

/// Labels each consecutive pair of user turns whose semantic embeddings
/// match at or above `similarity_threshold`: a repeat when the
/// normalized transcripts are equal, otherwise a rephrase. Labels are
/// emitted in turn order and attach to the later turn, pointing back at
/// the turn that triggered it.
pub fn detect_repeat_rephrase(
    session: &Session,
    embeddings: &HashMap<String, Vector>,
    similarity_threshold: f64,
) -> Result<Vec<RephraseLabel>, PipelineError> {
    if !(similarity_threshold > 0.0 && similarity_threshold <= 1.0) {
        return Err(PipelineError::InvalidConfig {
            context: format!("similarity threshold must be in (0, 1], got {similarity_threshold}"),
        });
    }
    let users: Vec<_> = session
        .turns
        .iter()
        .filter(|t| t.speaker == Speaker::User)
        .collect();
    let mut labels = Vec::new();
    for pair in users.windows(2) {
        let (earlier, later) = (pair[0], pair[1]);
        let emb_a =
            embeddings
                .get(&earlier.event_id)
                .ok_or_else(|| PipelineError::MissingEmbedding {
                    turn_id: earlier.event_id.clone(),
                })?;
        let emb_b =
            embeddings
                .get(&later.event_id)
                .ok_or_else(|| PipelineError::MissingEmbedding {
                    turn_id: later.event_id.clone(),
                })?;
        if cosine(emb_a, emb_b)? >= similarity_threshold {
            let kind = if normalize_text(&earlier.transcript) == normalize_text(&later.transcript) {
                LabelKind::Repeat
            } else {
                LabelKind::Rephrase
            };
            labels.push(RephraseLabel {
                turn_id: later.event_id.clone(),
                kind,
                source_turn_id: earlier.event_id.clone(),
            });
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{agent_event, user_event};

    fn session(turns: Vec<super::super::EventRecord>) -> Session {
        Session {
            session_id: "s0000".into(),
            turns,
            rho_final_s: 90.0,
        }
    }

    fn embeddings(pairs: &[(&str, Vec<f64>)]) -> HashMap<String, Vector> {
        pairs
            .iter()
            .map(|(id, data)| (id.to_string(), Vector::new(data.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn identical_consecutive_transcripts_are_a_repeat() {
        let s = session(vec![
            user_event("u0", 0.0, "turn on the lights"),
            agent_event("a0", 2.0, "sorry?"),
            user_event("u1", 5.0, "Turn on the lights!"),
        ]);
        let embs = embeddings(&[("u0", vec![0.2, 0.8]), ("u1", vec![0.2, 0.8])]);
        let labels = detect_repeat_rephrase(&s, &embs, 0.9).unwrap();
        assert_eq!(
            labels,
            vec![RephraseLabel {
                turn_id: "u1".into(),
                kind: LabelKind::Repeat,
                source_turn_id: "u0".into()
            }]
        );
    }

    #[test]
    fn orthogonal_embeddings_give_no_labels() {
        let s = session(vec![
            user_event("u0", 0.0, "play some jazz"),
            user_event("u1", 5.0, "what time is it"),
        ]);
        let embs = embeddings(&[("u0", vec![1.0, 0.0]), ("u1", vec![0.0, 1.0])]);
        assert!(detect_repeat_rephrase(&s, &embs, 0.9).unwrap().is_empty());
    }

    #[test]
    fn high_cosine_with_different_text_is_a_rephrase() {
        // Two unit vectors at cosine exactly 0.93 by construction.
        let c = 0.93_f64;
        let s = session(vec![
            user_event("u0", 0.0, "are there noisy neighbors"),
            user_event("u1", 6.0, "is the place quiet enough"),
        ]);
        let embs = embeddings(&[
            ("u0", vec![1.0, 0.0]),
            ("u1", vec![c, (1.0 - c * c).sqrt()]),
        ]);
        let labels = detect_repeat_rephrase(&s, &embs, 0.9).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].kind, LabelKind::Rephrase);
        // A tighter threshold drops it.
        assert!(detect_repeat_rephrase(&s, &embs, 0.95).unwrap().is_empty());
    }

    #[test]
    fn missing_embedding_is_an_error() {
        let s = session(vec![
            user_event("u0", 0.0, "hello there"),
            user_event("u1", 5.0, "hello there"),
        ]);
        let embs = embeddings(&[("u0", vec![1.0, 0.0])]);
        assert_eq!(
            detect_repeat_rephrase(&s, &embs, 0.9).unwrap_err(),
            PipelineError::MissingEmbedding {
                turn_id: "u1".into()
            }
        );
    }

    #[test]
    fn threshold_must_be_a_positive_fraction() {
        let s = session(vec![]);
        assert!(detect_repeat_rephrase(&s, &HashMap::new(), 0.0).is_err());
        assert!(detect_repeat_rephrase(&s, &HashMap::new(), 1.5).is_err());
    }
}
