//! Greedy session construction over a timestamped event stream.
//!
//! The earliest unassigned event seeds a session; membership is the
//! transitive closure of "within rho seconds of an already-included
//! event" on both sides. Oversized closures shrink rho by halving
//! (clamped to the floor); if the floor still leaves too many events,
//! the cap wins and the closest-in-time events to the seed are kept.

use super::{EventRecord, PipelineError, Session, SessionBuilderConfig};

/// Partitions `events` into sessions. Input order does not matter; the
/// stream is sorted by timestamp internally. Every event lands in
/// exactly one session.
pub fn build_sessions(
    events: Vec<EventRecord>,
    cfg: &SessionBuilderConfig,
) -> Result<Vec<Session>, PipelineError> {
    cfg.validate()?;
    for e in &events {
        e.validate()?;
    }
    let mut ordered = events;
    ordered.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));

    let mut sessions = Vec::new();
    let mut assigned = vec![false; ordered.len()];
    let mut next_unassigned = 0;
    while next_unassigned < ordered.len() {
        let seed = next_unassigned;
        let mut rho = cfg.rho_initial_s;
        let members = loop {
            let closure = gap_closure(&ordered, &assigned, seed, rho);
            if closure.len() <= cfg.max_utterances {
                break closure;
            }
            if rho <= cfg.rho_floor_s {
                log::warn!(
                    "session seeded at {} still has {} events at the {}s floor; keeping the {} closest to the seed",
                    ordered[seed].timestamp_s,
                    closure.len(),
                    cfg.rho_floor_s,
                    cfg.max_utterances
                );
                break truncate_to_seed(&ordered, closure, seed, cfg.max_utterances);
            }
            rho = (rho / 2.0).max(cfg.rho_floor_s);
        };

        let session_id = format!("s{:04}", sessions.len());
        let mut turns = Vec::with_capacity(members.len());
        for idx in members {
            assigned[idx] = true;
            turns.push(ordered[idx].clone());
        }
        turns.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
        sessions.push(Session {
            session_id,
            turns,
            rho_final_s: rho,
        });

        while next_unassigned < ordered.len() && assigned[next_unassigned] {
            next_unassigned += 1;
        }
    }
    Ok(sessions)
}

/// Transitive closure of the "within rho" relation around `seed`, over
/// unassigned events. On a sorted timeline this is the maximal run
/// containing the seed in which consecutive unassigned events are at
/// most rho apart.
fn gap_closure(events: &[EventRecord], assigned: &[bool], seed: usize, rho: f64) -> Vec<usize> {
    let unassigned: Vec<usize> = (0..events.len()).filter(|&i| !assigned[i]).collect();
    let seed_pos = unassigned.binary_search(&seed).expect("seed is unassigned");

    let mut lo = seed_pos;
    while lo > 0 {
        let gap = events[unassigned[lo]].timestamp_s - events[unassigned[lo - 1]].timestamp_s;
        if gap <= rho {
            lo -= 1;
        } else {
            break;
        }
    }
    let mut hi = seed_pos;
    while hi + 1 < unassigned.len() {
        let gap = events[unassigned[hi + 1]].timestamp_s - events[unassigned[hi]].timestamp_s;
        if gap <= rho {
            hi += 1;
        } else {
            break;
        }
    }
    unassigned[lo..=hi].to_vec()
}

/// Keeps the `cap` members closest in time to the seed; ties prefer the
/// earlier event.
fn truncate_to_seed(
    events: &[EventRecord],
    mut members: Vec<usize>,
    seed: usize,
    cap: usize,
) -> Vec<usize> {
    let seed_t = events[seed].timestamp_s;
    members.sort_by(|&a, &b| {
        let da = (events[a].timestamp_s - seed_t).abs();
        let db = (events[b].timestamp_s - seed_t).abs();
        da.total_cmp(&db)
            .then(events[a].timestamp_s.total_cmp(&events[b].timestamp_s))
    });
    members.truncate(cap);
    members.sort_unstable();
    members
}
