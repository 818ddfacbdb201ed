//! Run configuration: one TOML document describing a whole run, with every
//! field defaulting to the reference hyperparameters, `--set key=value`
//! overrides, and unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lsd_core::agent::AgentConfig;
use lsd_core::env::TaskSpec;
use lsd_core::eval::Policy;
use lsd_core::mllm::ServiceConfig;
use lsd_core::qnet::QNetConfig;

/// Approximate-index build parameters ([`lsd_core::index::IndexConfig`] minus
/// the dimension, which comes from the store).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSettings {
    /// Brute-force index instead of IVF-PQ (small pools, exact tests).
    pub exact: bool,
    pub nlist: usize,
    pub m: usize,
    pub nbits: usize,
    pub seed: u64,
}

impl Default for IndexSettings {
    fn default() -> Self {
        IndexSettings { exact: false, nlist: 100, m: 8, nbits: 8, seed: 42 }
    }
}

/// Dataset split parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub seed: u64,
    pub n_max: usize,
    pub n_eval: usize,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings { seed: 0, n_max: lsd_core::eval::N_MAX, n_eval: lsd_core::eval::N_EVAL }
    }
}

/// Which scorer backs the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerChoice {
    /// Deterministic similarity-vote surrogate (no network, default).
    Synthetic,
    /// The configured HTTP endpoint.
    Service,
    /// An in-process stub HTTP server (exercises the full client path).
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSettings {
    pub choice: ScorerChoice,
    /// Similarity sharpness of the synthetic scorer.
    pub beta: f64,
    pub service: ServiceConfig,
}

impl Default for ScorerSettings {
    fn default() -> Self {
        ScorerSettings { choice: ScorerChoice::Synthetic, beta: 10.0, service: ServiceConfig::default() }
    }
}

/// Evaluation defaults: the K sweep and every policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub policies: Vec<Policy>,
    pub k_list: Vec<usize>,
    pub seed: u64,
    pub bootstrap_resamples: usize,
    pub permutation_trials: u32,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            policies: vec![Policy::Lsd, Policy::Knn, Policy::Random, Policy::ZeroShot],
            k_list: vec![1, 4, 8, 16],
            seed: 0,
            bootstrap_resamples: 1_000,
            permutation_trials: 8,
        }
    }
}

/// Orchestration knobs that belong to the runner, not the algorithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    /// Checkpoint every this many optimizer steps (0 disables periodic
    /// checkpoints; the final one is always written).
    pub checkpoint_every: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings { checkpoint_every: 1_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    pub store: PathBuf,
    pub index: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathSettings {
    fn default() -> Self {
        PathSettings {
            store: PathBuf::from("data/store.lsdemb"),
            index: PathBuf::from("data/index.lsdivfpq"),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

/// The whole run in one document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub qnet: QNetConfig,
    pub agent: AgentConfig,
    pub index: IndexSettings,
    pub split: SplitSettings,
    pub scorer: ScorerSettings,
    pub eval: EvalSettings,
    pub run: RunSettings,
    pub paths: PathSettings,
}

impl RunConfig {
    /// Load a config file (or pure defaults when `path` is `None`) and apply
    /// `--set key=value` overrides on top, dotted keys addressing nested
    /// tables (`agent.train_steps=50`).
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, String> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?,
            None => String::new(),
        };
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| format!("config parse error: {e}"))?;
        for set in sets {
            apply_set(&mut value, set)?;
        }
        value.try_into().map_err(|e| format!("config error: {e}"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse the value side of `--set` as a TOML scalar/array, falling back to a
/// plain string (URLs and friends don't parse as TOML).
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_set(root: &mut toml::Value, set: &str) -> Result<(), String> {
    let (key, raw) =
        set.split_once('=').ok_or_else(|| format!("--set needs key=value, got {set:?}"))?;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(format!("--set key {key:?} has an empty path segment"));
    }
    let (last, parents) = segments.split_last().expect("split_once gave a nonempty key");
    let mut node = root;
    for segment in parents {
        node = node
            .as_table_mut()
            .ok_or_else(|| format!("--set key {key:?}: {segment:?} is not a table"))?
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| format!("--set key {key:?}: parent of {last:?} is not a table"))?
        .insert(last.to_string(), parse_scalar(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use lsd_core::qnet::EncoderMode;

    #[test]
    fn defaults_mirror_the_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.agent.gamma, 0.99);
        assert_eq!(c.agent.lr, 5e-6);
        assert_eq!(c.agent.batch_size, 32);
        assert_eq!(c.agent.candidates, 200);
        assert_eq!(c.agent.tau, 0.005);
        assert_eq!(c.agent.train_steps, 16_000);
        assert_eq!(c.qnet.dim, 768);
        assert_eq!(c.qnet.layers, 2);
        assert_eq!(c.qnet.heads, 4);
        assert_eq!(c.qnet.ffn_dim, 3072);
        assert_eq!(c.qnet.dropout, 0.1);
        assert_eq!(c.qnet.encoder_mode, EncoderMode::QueryCentric);
        assert_eq!(c.index.nlist, 100);
        assert_eq!(c.index.m, 8);
        assert_eq!(c.index.nbits, 8);
        assert_eq!(c.split.n_max, 25_000);
        assert_eq!(c.split.n_eval, 1_000);
        assert_eq!(c.eval.k_list, vec![1, 4, 8, 16]);
        assert_eq!(c.run.checkpoint_every, 1_000);
    }

    #[test]
    fn round_trip_is_identity() {
        let config = RunConfig::default();
        let text = config.to_toml();
        let reparsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, reparsed);
        assert_eq!(text, reparsed.to_toml());
    }

    #[test]
    fn partial_files_inherit_defaults_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[agent]\ntrain_steps = 50\n").unwrap();
        let config = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(config.agent.train_steps, 50);
        assert_eq!(config.agent.gamma, 0.99, "untouched fields keep defaults");

        std::fs::write(&path, "[agent]\ntrain_stepz = 50\n").unwrap();
        let err = RunConfig::load(Some(&path), &[]).unwrap_err();
        assert!(err.contains("train_stepz"), "{err}");

        std::fs::write(&path, "[nonsense]\nx = 1\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }

    #[test]
    fn set_overrides_reach_nested_tables_and_parse_types() {
        let sets = vec![
            "agent.train_steps=25".to_string(),
            "qnet.encoder_mode=\"concat\"".to_string(),
            "index.exact=true".to_string(),
            "scorer.service.endpoint=http://10.0.0.1:9999/v1/chat".to_string(),
            "eval.k_list=[1, 2]".to_string(),
        ];
        let config = RunConfig::load(None, &sets).unwrap();
        assert_eq!(config.agent.train_steps, 25);
        assert_eq!(config.qnet.encoder_mode, EncoderMode::Concat);
        assert!(config.index.exact);
        assert_eq!(config.scorer.service.endpoint, "http://10.0.0.1:9999/v1/chat");
        assert_eq!(config.eval.k_list, vec![1, 2]);

        let bad = RunConfig::load(None, &["agent.not_a_key=1".to_string()]);
        assert!(bad.is_err());
        let malformed = RunConfig::load(None, &["agent.train_steps".to_string()]);
        assert!(malformed.unwrap_err().contains("key=value"));
    }
}
