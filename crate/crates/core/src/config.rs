//! The run configuration: one TOML document with a section per stage.
//!
//! Every field has a default, unknown keys are rejected, and relative paths
//! are resolved against the directory of the file they were read from.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizerMode;
use crate::denoiser::DenoiserConfig;
use crate::embedding::{bits_dimension, SpaceKind};
use crate::error::{Result, SedError};
use crate::schedule::{NoiseSchedule, DEFAULT_COSINE_OFFSET};
use crate::skipgram::SkipGramConfig;
use crate::training::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Setting this variable to `1`/`true` turns determinism mode on, `0`/`false`
/// turns it off, overriding the config file.
pub const DETERMINISM_ENV: &str = "SED_DETERMINISTIC";

/// Reads [`DETERMINISM_ENV`]; `None` when unset or unrecognised.
pub fn determinism_from_env() -> Option<bool> {
    match std::env::var(DETERMINISM_ENV).ok()?.trim() {
        "1" | "true" | "on" | "yes" => Some(true),
        "0" | "false" | "off" | "no" => Some(false),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    /// A vocabulary file written by `prepare`; built from the corpus when
    /// absent.
    pub vocab_path: Option<PathBuf>,
    pub mode: TokenizerMode,
    /// Maximum vocabulary size including PAD and UNK.
    pub vocab_size: usize,
    /// Fraction of corpus lines held out for evaluation (every n-th line).
    pub validation_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            path: None,
            vocab_path: None,
            mode: TokenizerMode::Char,
            vocab_size: 256,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub kind: SpaceKind,
    /// Ignored by the bits space.
    pub d_embed: usize,
    pub seed: u64,
    /// An embedding file (from `prepare` or elsewhere) used instead of
    /// building the space.
    pub embedding_path: Option<PathBuf>,
    pub skipgram: SkipGramConfig,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            kind: SpaceKind::Random,
            d_embed: 32,
            seed: 0,
            embedding_path: None,
            skipgram: SkipGramConfig::default(),
        }
    }
}

impl SpaceConfig {
    /// The dimension the space will have for a vocabulary of `vocab_size`.
    pub fn dimension(&self, vocab_size: usize) -> usize {
        match self.kind {
            SpaceKind::Bits => bits_dimension(vocab_size),
            _ => self.d_embed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub offset: f64,
    /// Lower bound applied to every `β_t`; 0 keeps the plain cosine.
    pub min_beta: f64,
    pub sigma0: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            offset: DEFAULT_COSINE_OFFSET,
            min_beta: 0.0,
            sigma0: 1e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine_with_floor(self.steps, self.offset, self.min_beta, self.sigma0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Reverse steps; the schedule length when absent.
    pub steps: Option<usize>,
    /// Output length; the training sequence length when absent.
    pub length: Option<usize>,
    pub scales: Vec<f64>,
    pub count: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: None,
            length: None,
            scales: vec![1.0],
            count: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalTask {
    #[default]
    Unconditional,
    SuffixInfill,
}

impl std::str::FromStr for EvalTask {
    type Err = SedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconditional" => Ok(Self::Unconditional),
            "suffix-infill" => Ok(Self::SuffixInfill),
            other => Err(SedError::InvalidArgument(format!(
                "unknown task {other:?} (expected unconditional or suffix-infill)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub task: EvalTask,
    pub samples: usize,
    pub scales: Vec<f64>,
    /// Fraction of each sequence given as the prefix in suffix infilling.
    pub prefix_fraction: f64,
    pub scorer_order: usize,
    pub scorer_k: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: EvalTask::Unconditional,
            samples: 32,
            scales: vec![1.0, 2.0, 4.0, 8.0],
            prefix_fraction: 0.5,
            scorer_order: 3,
            scorer_k: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub config_version: u32,
    /// Omits wall-clock quantities from logs and manifests.
    pub deterministic: bool,
    pub corpus: CorpusConfig,
    pub space: SpaceConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            deterministic: false,
            corpus: CorpusConfig::default(),
            space: SpaceConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SedError::Config(e.to_string()))?;
        if cfg.config_version != CONFIG_VERSION {
            return Err(SedError::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                cfg.config_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SedError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.corpus.path,
            &mut cfg.corpus.vocab_path,
            &mut cfg.space.embedding_path,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()).map_err(|e| SedError::io(path, e))
    }

    /// Determinism mode after applying [`DETERMINISM_ENV`].
    pub fn effective_determinism(&self) -> bool {
        determinism_from_env().unwrap_or(self.deterministic)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.corpus.validation_fraction) {
            return Err(SedError::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.corpus.validation_fraction
            )));
        }
        if self.corpus.vocab_size < 3 {
            return Err(SedError::Config("vocab_size must be at least 3".into()));
        }
        if self.sample.scales.iter().chain(&self.eval.scales).any(|s| !(0.0..=8.0).contains(s)) {
            return Err(SedError::Config("guidance scales must lie in [0, 8]".into()));
        }
        if !(0.0..1.0).contains(&self.eval.prefix_fraction) {
            return Err(SedError::Config("prefix_fraction must lie in [0, 1)".into()));
        }
        self.schedule.build()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().train.max_spans, 5);
        assert_eq!(RunConfig::default().schedule.steps, 1000);
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[train]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml_str("config_version = 2").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml_str(
            "[space]\nkind = \"bits\"\n[train]\nmax_spans = 3\n[eval]\ntask = \"suffix-infill\"",
        )
        .unwrap();
        assert_eq!(cfg.space.kind, SpaceKind::Bits);
        assert_eq!(cfg.space.dimension(256), 8);
        assert_eq!(cfg.train.max_spans, 3);
        assert_eq!(cfg.train.seq_len, 64);
        assert_eq!(cfg.eval.task, EvalTask::SuffixInfill);
    }
}
