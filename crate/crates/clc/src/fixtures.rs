//! A small bundled demo corpus: three conversations (twelve turns) with
//! frame embeddings and n-best hypothesis embeddings, wired so that
//! exactly one conversation qualifies for error injection and the
//! injected repeat is recoverable by detection.

use std::path::Path;

use crate::config::{HeadConfig, Paths, RunConfig};
use crate::io::{clce, jsonl, IoError};
use crate::pipeline::{Hypothesis, InjectionConfig, Speaker};
use crate::tensor::{Matrix, Vector};

/// Where a generated demo corpus lives and how to run it.
#[derive(Debug, Clone)]
pub struct DemoCorpus {
    pub manifest: std::path::PathBuf,
    pub config: RunConfig,
}

const FRAME_WIDTH: usize = 4;

/// Frames whose column mean is the `axis` basis vector: three rows at
/// 0.9x, 1.0x, and 1.1x. Distinct axes pool to orthogonal embeddings.
fn frames_on_axis(axis: usize) -> Matrix {
    let mut data = vec![0.0; 3 * FRAME_WIDTH];
    for (row, scale) in [0.9, 1.0, 1.1].into_iter().enumerate() {
        data[row * FRAME_WIDTH + axis] = scale;
    }
    Matrix::new(3, FRAME_WIDTH, data).expect("finite fixture frames")
}

struct UserTurnSpec {
    transcript: &'static str,
    /// `(text, score)` pairs; the best score is the system output.
    hypotheses: Vec<(&'static str, f64)>,
    axis: usize,
}

struct ConversationSpec {
    users: Vec<UserTurnSpec>,
    /// Reply following the same-index user turn; the last user turn of
    /// a conversation may go unanswered.
    agent_replies: Vec<&'static str>,
}

/// Three conversations, 12 turns in all. Only the second has a user
/// turn whose top hypothesis exceeds the 15% WER bar (one substitution
/// in five words), so it is the sole injection candidate.
fn conversations() -> Vec<ConversationSpec> {
    vec![
        ConversationSpec {
            users: vec![
                UserTurnSpec {
                    transcript: "play some jazz music",
                    hypotheses: vec![
                        ("play some jazz music", -0.1),
                        ("play some jab music", -0.9),
                    ],
                    axis: 0,
                },
                UserTurnSpec {
                    transcript: "turn up the volume",
                    hypotheses: vec![("turn up the volume", -0.2), ("turn up the volumes", -0.7)],
                    axis: 1,
                },
                UserTurnSpec {
                    transcript: "skip to the next song",
                    hypotheses: vec![
                        ("skip to the next song", -0.3),
                        ("skip the next song", -0.8),
                    ],
                    axis: 2,
                },
            ],
            agent_replies: vec!["playing jazz", "volume increased"],
        },
        ConversationSpec {
            users: vec![
                UserTurnSpec {
                    transcript: "book a table for two",
                    hypotheses: vec![
                        ("book a table for two", -0.1),
                        ("book a cable for two", -0.6),
                    ],
                    axis: 0,
                },
                UserTurnSpec {
                    transcript: "turn on the kitchen lights",
                    hypotheses: vec![
                        ("turn on the chicken lights", -0.1),
                        ("turn on the kitchen lights", -0.9),
                    ],
                    axis: 1,
                },
                UserTurnSpec {
                    transcript: "set a timer for ten minutes",
                    hypotheses: vec![
                        ("set a timer for ten minutes", -0.2),
                        ("set a timer for tan minutes", -0.8),
                    ],
                    axis: 2,
                },
            ],
            agent_replies: vec!["which restaurant", "done"],
        },
        ConversationSpec {
            users: vec![UserTurnSpec {
                transcript: "what is the weather today",
                hypotheses: vec![
                    ("what is the weather today", -0.1),
                    ("what is the whether today", -0.5),
                ],
                axis: 3,
            }],
            agent_replies: vec!["sunny and clear"],
        },
    ]
}

/// Deterministic hypothesis embedding: a fixed palette entry plus small
/// per-index offsets, never zero and never tied.
fn hypothesis_embedding(session: usize, turn: usize, hyp: usize) -> Vector {
    let base = [0.5, -0.25, 0.75, 0.125];
    let data = base
        .iter()
        .enumerate()
        .map(|(c, b)| {
            b + 0.125 * session as f64 + 0.0625 * turn as f64
                - 0.25 * hyp as f64 * (c as f64 + 1.0) / 4.0
        })
        .collect();
    Vector::new(data).expect("finite fixture embedding")
}

/// Writes the 12-turn demo corpus (manifest plus embedding files) into
/// `dir` and returns a ready-to-run configuration: injection always
/// fires on the single candidate conversation and always inserts a
/// verbatim repeat.
pub fn write_demo_corpus(dir: &Path) -> Result<DemoCorpus, IoError> {
    let embeddings = dir.join("embeddings");
    std::fs::create_dir_all(&embeddings).map_err(|e| crate::io::file_error(&embeddings, e))?;

    let mut records = Vec::new();
    for (s, conversation) in conversations().iter().enumerate() {
        let session_start = 1000.0 * s as f64;
        for (i, spec) in conversation.users.iter().enumerate() {
            let user_id = format!("u{s}{i}");
            let frame_file = format!("embeddings/{user_id}.clce");
            clce::write_matrix(&dir.join(&frame_file), &frames_on_axis(spec.axis))?;

            let mut hyp_records = Vec::new();
            for (j, (text, score)) in spec.hypotheses.iter().enumerate() {
                let hyp_file = format!("embeddings/{user_id}h{j}.clce");
                clce::write_vector(&dir.join(&hyp_file), &hypothesis_embedding(s, i, j))?;
                hyp_records.push(Hypothesis {
                    text: text.to_string(),
                    score: *score,
                    embedding_ref: Some(hyp_file),
                });
            }

            records.push(jsonl::TurnRecord {
                session_id: None,
                turn_index: None,
                event_id: Some(user_id),
                speaker: Speaker::User,
                timestamp_s: session_start + 20.0 * i as f64,
                transcript: spec.transcript.to_string(),
                hyp_transcripts: hyp_records,
                wer: None,
                embedding_ref: Some(frame_file),
                labels: Vec::new(),
                rho_final_s: None,
            });
            if let Some(reply) = conversation.agent_replies.get(i) {
                records.push(jsonl::TurnRecord {
                    session_id: None,
                    turn_index: None,
                    event_id: Some(format!("a{s}{i}")),
                    speaker: Speaker::Agent,
                    timestamp_s: session_start + 20.0 * i as f64 + 8.0,
                    transcript: reply.to_string(),
                    hyp_transcripts: Vec::new(),
                    wer: None,
                    embedding_ref: None,
                    labels: Vec::new(),
                    rho_final_s: None,
                });
            }
        }
    }

    let manifest = dir.join("turns.jsonl");
    jsonl::write_turns(&manifest, &records)?;

    let config = RunConfig {
        injection: InjectionConfig {
            injection_rate: 1.0,
            repeat_vs_rephrase_split: 1.0,
            rng_seed: 7,
            ..InjectionConfig::default()
        },
        head: HeadConfig {
            k: FRAME_WIDTH,
            h: 4,
            d: 4,
            dropout_rate: 0.0,
        },
        paths: Paths {
            input: Some(manifest.clone()),
            ..Paths::default()
        },
        seed: 7,
        ..RunConfig::default()
    };
    // The on-disk copy stays relocatable: its input path is relative to
    // the config file and resolved by `RunConfig::load`.
    let mut disk_config = config.clone();
    disk_config.paths.input = Some("turns.jsonl".into());
    let config_path = dir.join("config.json");
    let config_json = serde_json::to_string_pretty(&disk_config).expect("config serializes");
    std::fs::write(&config_path, config_json + "\n")
        .map_err(|e| crate::io::file_error(&config_path, e))?;

    Ok(DemoCorpus { manifest, config })
}
