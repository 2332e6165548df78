//! Run configuration: a plain-text TOML file of `key = value` sections with
//! command-line flag overrides (flags win). Every field has a default,
//! unknown keys are rejected, and the effective configuration is echoed into
//! each run directory for provenance.

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::NetworkSpec;
use crate::train::TrainConfig;
use std::path::Path;

/// Numeric precision of a run. Gradient checks always use f64.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision '{other}' (expected f32 or f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub precision: Precision,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// Subjects assigned to training; the rest are held out.
    pub train_subjects: usize,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train_subjects: 24,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSection {
    /// Seeds the ablation suite runs; the mean column averages over them.
    pub seeds: Vec<u64>,
}

impl Default for SuiteSection {
    fn default() -> Self {
        SuiteSection { seeds: vec![1, 2, 3] }
    }
}

/// Full configuration of one harness invocation. The default is the
/// desk-scale setup.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: GenConfig,
    pub split: SplitSection,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub suite: SuiteSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            data: GenConfig::default(),
            split: SplitSection::default(),
            network: NetworkSpec::default(),
            train: TrainConfig::desk_default(),
            suite: SuiteSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Input(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    /// Parses a config file; absent keys take their desk-scale defaults and
    /// unknown keys are rejected.
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    /// Applies the master seed to every seeded section (flag override).
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        self.suite.seeds = (0..self.suite.seeds.len() as u64).map(|i| seed + i).collect();
    }

    /// Exact serialized form written into each run directory.
    pub fn echo(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config echo failed: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_echo_roundtrip() {
        let cfg = RunConfig::default();
        let echo = cfg.echo().unwrap();
        let again = RunConfig::parse(&echo).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("[train]\nbananas = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let err = RunConfig::parse("[fruit]\nkind = \"pear\"\n").unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn partial_file_keeps_desk_defaults_elsewhere() {
        let cfg = RunConfig::parse("[data]\nclasses = 4\n").unwrap();
        assert_eq!(cfg.data.classes, 4);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.iterations, RunConfig::default().train.iterations);
    }

    #[test]
    fn explicit_train_values_win_over_desk_defaults() {
        let cfg = RunConfig::parse("[train]\nbatch_size = 4\n").unwrap();
        assert_eq!(cfg.train.batch_size, 4);
    }

    #[test]
    fn seed_override_touches_every_section() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(42);
        assert_eq!(cfg.data.seed, 42);
        assert_eq!(cfg.split.seed, 42);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.suite.seeds, vec![42, 43, 44]);
    }
}
