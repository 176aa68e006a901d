//! Synthetic error injection into clean conversations.
//!
//! Conversations containing a user turn whose WER exceeds the candidate
//! threshold are eligible; a seeded draw without replacement picks
//! `floor(rate * candidates)` of them. Each selected conversation gains
//! two turns right after the agent turn that answered its worst-WER
//! user turn: a non-specific agent error response (round-robin from the
//! pool) and a user retry, either a verbatim repeat or a rephrase.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    EventRecord, InjectionConfig, LabelKind, PipelineError, RephraseLabel, Rephraser, Session,
    Speaker,
};

/// The worst-WER user turn of a session, if any exceeds the threshold.
/// Ties go to the earliest turn.
fn injection_target(
    session: &Session,
    per_turn_wer: &HashMap<String, f64>,
    threshold: f64,
) -> Result<Option<usize>, PipelineError> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, turn) in session.turns.iter().enumerate() {
        if turn.speaker != Speaker::User {
            continue;
        }
        let wer = *per_turn_wer
            .get(&turn.event_id)
            .ok_or_else(|| PipelineError::MissingWer {
                turn_id: turn.event_id.clone(),
            })?;
        if wer > threshold && best.is_none_or(|(_, w)| wer > w) {
            best = Some((idx, wer));
        }
    }
    Ok(best.map(|(idx, _)| idx))
}

/// Seeded draw of `k` distinct indices out of `0..n` (partial
/// Fisher-Yates), returned in ascending order.
fn draw_without_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut selected = indices[..k].to_vec();
    selected.sort_unstable();
    selected
}

/// Injects repeat/rephrase turns into a seeded fraction of the
/// candidate conversations. Returns the modified sessions (unselected
/// ones pass through untouched) and one label per insertion. Everything
/// is a pure function of the inputs and `cfg.rng_seed`.
pub fn inject_errors(
    sessions: &[Session],
    per_turn_wer: &HashMap<String, f64>,
    cfg: &InjectionConfig,
    rephraser: &dyn Rephraser,
) -> Result<(Vec<Session>, Vec<RephraseLabel>), PipelineError> {
    cfg.validate()?;

    let mut targets = Vec::with_capacity(sessions.len());
    let mut candidates = Vec::new();
    for (idx, session) in sessions.iter().enumerate() {
        let target = injection_target(session, per_turn_wer, cfg.wer_candidate_threshold)?;
        if target.is_some() {
            candidates.push(idx);
        }
        targets.push(target);
    }

    let n_inject = (cfg.injection_rate * candidates.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let selected: Vec<usize> = draw_without_replacement(&mut rng, candidates.len(), n_inject)
        .into_iter()
        .map(|c| candidates[c])
        .collect();
    if n_inject > 0 && cfg.error_response_pool.is_empty() {
        return Err(PipelineError::EmptyErrorPool);
    }

    let mut out = sessions.to_vec();
    let mut labels = Vec::with_capacity(n_inject);
    for (insertion, &session_idx) in selected.iter().enumerate() {
        let session = &mut out[session_idx];
        let target_idx = targets[session_idx].expect("selected sessions have a target");
        let source = session.turns[target_idx].clone();

        // Insert after the agent turn that answered the target, or
        // directly after the target when no agent reply follows.
        let insert_at = session.turns[target_idx + 1..]
            .iter()
            .position(|t| t.speaker == Speaker::Agent)
            .map(|offset| target_idx + 1 + offset + 1)
            .unwrap_or(target_idx + 1);

        let (t0, t1) = {
            let before = session.turns[insert_at - 1].timestamp_s;
            match session.turns.get(insert_at) {
                Some(next) => {
                    let step = (next.timestamp_s - before) / 3.0;
                    (before + step, before + 2.0 * step)
                }
                None => (before + 1.0, before + 2.0),
            }
        };

        let error_text = &cfg.error_response_pool[insertion % cfg.error_response_pool.len()];
        let is_repeat = rng.gen::<f64>() < cfg.repeat_vs_rephrase_split;
        let (kind, retry_text) = if is_repeat {
            (LabelKind::Repeat, source.transcript.clone())
        } else {
            (LabelKind::Rephrase, rephraser.rephrase(&source.transcript)?)
        };

        let agent_turn = EventRecord {
            event_id: format!("{}-err-agent", source.event_id),
            timestamp_s: t0,
            speaker: Speaker::Agent,
            transcript: error_text.clone(),
            embedding_ref: None,
            hypotheses: Vec::new(),
        };
        // The retry reuses the source turn's embedding reference: a
        // repeat is the same audio re-synthesized, and a rephrase stays
        // semantically adjacent by construction.
        let user_turn = EventRecord {
            event_id: format!("{}-err-user", source.event_id),
            timestamp_s: t1,
            speaker: Speaker::User,
            transcript: retry_text,
            embedding_ref: source.embedding_ref.clone(),
            hypotheses: Vec::new(),
        };
        labels.push(RephraseLabel {
            turn_id: user_turn.event_id.clone(),
            kind,
            source_turn_id: source.event_id.clone(),
        });
        session
            .turns
            .splice(insert_at..insert_at, [agent_turn, user_turn]);
    }
    Ok((out, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{agent_event, user_event, TemplateRephraser};

    /// `n` two-turn conversations; the first `hot` have a user turn at
    /// WER 0.4, the rest at 0.0.
    fn corpus(n: usize, hot: usize) -> (Vec<Session>, HashMap<String, f64>) {
        let mut sessions = Vec::new();
        let mut wer = HashMap::new();
        for i in 0..n {
            let uid = format!("u{i}");
            sessions.push(Session {
                session_id: format!("s{i:04}"),
                turns: vec![
                    user_event(&uid, i as f64 * 1000.0, "book a table for two"),
                    agent_event(&format!("a{i}"), i as f64 * 1000.0 + 5.0, "done"),
                ],
                rho_final_s: 90.0,
            });
            wer.insert(uid, if i < hot { 0.4 } else { 0.0 });
        }
        (sessions, wer)
    }

    #[test]
    fn selects_floor_of_rate_times_candidates() {
        let (sessions, wer) = corpus(120, 100);
        let cfg = InjectionConfig {
            rng_seed: 7,
            ..Default::default()
        };
        let (out, labels) =
            inject_errors(&sessions, &wer, &cfg, &TemplateRephraser::new()).unwrap();
        assert_eq!(labels.len(), 20);
        let grown = out
            .iter()
            .zip(&sessions)
            .filter(|(a, b)| a.turns.len() != b.turns.len())
            .count();
        assert_eq!(grown, 20);
        for (a, b) in out.iter().zip(&sessions) {
            assert!(a.turns.len() == b.turns.len() || a.turns.len() == b.turns.len() + 2);
            // Timestamps stay sorted after insertion.
            for pair in a.turns.windows(2) {
                assert!(pair[0].timestamp_s <= pair[1].timestamp_s);
            }
        }
        // Labels point at sources whose WER exceeded the threshold.
        for label in &labels {
            assert!(wer[&label.source_turn_id] > cfg.wer_candidate_threshold);
        }
    }

    #[test]
    fn no_candidates_means_no_change() {
        let (sessions, wer) = corpus(10, 0);
        let cfg = InjectionConfig {
            rng_seed: 7,
            ..Default::default()
        };
        let (out, labels) =
            inject_errors(&sessions, &wer, &cfg, &TemplateRephraser::new()).unwrap();
        assert_eq!(out, sessions);
        assert!(labels.is_empty());
    }

    #[test]
    fn same_seed_is_reproducible_and_different_seeds_diverge() {
        let (sessions, wer) = corpus(40, 30);
        let cfg = InjectionConfig {
            rng_seed: 11,
            ..Default::default()
        };
        let a = inject_errors(&sessions, &wer, &cfg, &TemplateRephraser::new()).unwrap();
        let b = inject_errors(&sessions, &wer, &cfg, &TemplateRephraser::new()).unwrap();
        assert_eq!(a, b);
        let other = InjectionConfig {
            rng_seed: 12,
            ..cfg
        };
        let c = inject_errors(&sessions, &wer, &other, &TemplateRephraser::new()).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn repeat_copies_transcript_and_rephrase_rewrites_it() {
        let (sessions, wer) = corpus(4, 4);
        let always_repeat = InjectionConfig {
            injection_rate: 1.0,
            repeat_vs_rephrase_split: 1.0,
            rng_seed: 3,
            ..Default::default()
        };
        let (out, labels) =
            inject_errors(&sessions, &wer, &always_repeat, &TemplateRephraser::new()).unwrap();
        assert_eq!(labels.len(), 4);
        for (s, label) in out.iter().zip(&labels) {
            assert_eq!(label.kind, LabelKind::Repeat);
            assert_eq!(s.turns[3].transcript, s.turns[0].transcript);
            assert_eq!(s.turns[2].speaker, Speaker::Agent);
        }

        let always_rephrase = InjectionConfig {
            repeat_vs_rephrase_split: 0.0,
            ..always_repeat
        };
        let (out, labels) =
            inject_errors(&sessions, &wer, &always_rephrase, &TemplateRephraser::new()).unwrap();
        for (s, label) in out.iter().zip(&labels) {
            assert_eq!(label.kind, LabelKind::Rephrase);
            assert_ne!(s.turns[3].transcript, s.turns[0].transcript);
        }
    }

    #[test]
    fn empty_pool_only_matters_when_something_is_selected() {
        let cfg = InjectionConfig {
            error_response_pool: Vec::new(),
            injection_rate: 1.0,
            ..Default::default()
        };
        let (hot_sessions, hot_wer) = corpus(2, 2);
        assert_eq!(
            inject_errors(&hot_sessions, &hot_wer, &cfg, &TemplateRephraser::new()).unwrap_err(),
            PipelineError::EmptyErrorPool
        );
        let (cold_sessions, cold_wer) = corpus(2, 0);
        assert!(inject_errors(&cold_sessions, &cold_wer, &cfg, &TemplateRephraser::new()).is_ok());
    }

    #[test]
    fn missing_wer_entry_is_an_error() {
        let (sessions, _) = corpus(2, 2);
        let err = inject_errors(
            &sessions,
            &HashMap::new(),
            &InjectionConfig::default(),
            &TemplateRephraser::new(),
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::MissingWer { .. }));
    }
}
