//! Run configuration: one JSON document wiring every knob of the
//! pipeline together. All fields have defaults, so a config file only
//! needs the values it overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::{file_error, IoError};
use crate::losses::LossConfig;
use crate::pipeline::{InjectionConfig, PipelineError, SessionBuilderConfig};

/// Numeric strictness of a run.
///
/// `Verify` is the reference behavior: full 64-bit evaluation with
/// analytic gradients and deterministic sequential reductions. `Fast`
/// trades the derivative side away: losses are evaluated forward-only
/// and gradient norms are omitted from reports. On-disk embeddings are
/// 32-bit in either mode and up-cast on read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Verify,
    Fast,
}

/// Projection-head shape used when no checkpoint is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Frame-embedding width the heads consume.
    pub k: usize,
    /// Hidden width.
    pub h: usize,
    /// Output embedding width.
    pub d: usize,
    pub dropout_rate: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            k: 8,
            h: 8,
            d: 8,
            dropout_rate: 0.1,
        }
    }
}

/// Checkpoint manifests for the three heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCheckpointPaths {
    pub current: PathBuf,
    pub past: PathBuf,
    pub future: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Input JSONL manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Report destination; stdout when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Head checkpoints; seeded initialization when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_checkpoints: Option<HeadCheckpointPaths>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub session: SessionBuilderConfig,
    pub injection: InjectionConfig,
    pub head: HeadConfig,
    /// Cosine threshold for repeat/rephrase detection.
    pub similarity_threshold: f64,
    /// Deletion-rate cut for the filter subcommand.
    pub deletion_rate_threshold: f64,
    /// Externally supplied task-loss scalar entering the overall loss.
    pub l_asr: f64,
    pub paths: Paths,
    /// Master seed for head initialization.
    pub seed: u64,
    pub mode: Mode,
    /// Column chunk for memory-bounded loss evaluation; dense when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<usize>,
    /// Hide future context, evaluation-style: the future loss term is
    /// dropped and future embeddings are never computed.
    pub mask_future: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            session: SessionBuilderConfig::default(),
            injection: InjectionConfig::default(),
            head: HeadConfig::default(),
            similarity_threshold: 0.9,
            deletion_rate_threshold: crate::pipeline::DEFAULT_DELETION_RATE_THRESHOLD,
            l_asr: 0.0,
            paths: Paths::default(),
            seed: 0,
            mode: Mode::Verify,
            chunk_size: None,
            mask_future: false,
        }
    }
}

impl RunConfig {
    /// Loads a config file. Relative input and checkpoint paths resolve
    /// against the config's own directory, so config bundles relocate.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| file_error(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| IoError::Manifest {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(input) = &mut cfg.paths.input {
            if input.is_relative() {
                *input = base.join(&input);
            }
        }
        if let Some(checkpoints) = &mut cfg.paths.head_checkpoints {
            for p in [
                &mut checkpoints.current,
                &mut checkpoints.past,
                &mut checkpoints.future,
            ] {
                if p.is_relative() {
                    *p = base.join(&p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.session.validate()?;
        self.injection.validate()?;
        self.loss
            .validate()
            .map_err(|e| PipelineError::InvalidConfig {
                context: e.to_string(),
            })?;
        if !(self.similarity_threshold > 0.0 && self.similarity_threshold <= 1.0) {
            return Err(PipelineError::InvalidConfig {
                context: format!(
                    "similarity_threshold must be in (0, 1], got {}",
                    self.similarity_threshold
                ),
            });
        }
        if self.head.k == 0 || self.head.h == 0 || self.head.d == 0 {
            return Err(PipelineError::InvalidConfig {
                context: "head widths must be positive".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"loss": {"tau": 0.5}, "seed": 9}"#).unwrap();
        assert_eq!(cfg.loss.tau, 0.5);
        assert_eq!(cfg.loss.alpha, 1.0);
        assert_eq!(cfg.loss.beta, 0.7);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.session.rho_initial_s, 90.0);
        assert_eq!(cfg.mode, Mode::Verify);
        cfg.validate().unwrap();
    }

    #[test]
    fn default_weights_match_the_tuned_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.loss.alpha, 1.0);
        assert_eq!(cfg.loss.beta, 0.7);
        assert_eq!(cfg.loss.tau, 0.1);
        assert_eq!(cfg.loss.gamma, 0.1);
        assert_eq!(cfg.loss.kappa, 1.0);
        assert_eq!(cfg.loss.lambda, 1.0);
        assert_eq!(cfg.loss.delta, 1.0);
        assert_eq!(cfg.injection.wer_candidate_threshold, 0.15);
        assert_eq!(cfg.injection.injection_rate, 0.20);
        assert_eq!(cfg.session.max_utterances, 5);
    }

    #[test]
    fn bad_nested_values_fail_validation() {
        let cfg: RunConfig = serde_json::from_str(r#"{"loss": {"tau": 0.0}}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"similarity_threshold": 0.0}"#).unwrap();
        assert!(cfg.validate().is_err());
    }
}
