use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{CategoricalEnvConfig, TokenEnvConfig};
use crate::error::{Error, Result};
use crate::qlearn::FitConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvConfig {
    Categorical(CategoricalEnvConfig),
    Token(TokenEnvConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Categorical(CategoricalEnvConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub behavior_quality: f64,
    pub epsilon: f64,
    pub episodes: usize,
    /// Defaults to the env's own horizon.
    pub horizon: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            behavior_quality: 0.5,
            epsilon: 0.1,
            episodes: 1000,
            horizon: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub coarse: FitConfig,
    pub fine: FitConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImproveSection {
    pub num_candidates: usize,
    pub cloning_smoothing: f64,
    pub passes: usize,
    pub generator_temperature: f64,
    pub generator_smoothing: f64,
    pub generator_fidelity: f64,
}

impl Default for ImproveSection {
    fn default() -> Self {
        ImproveSection {
            num_candidates: 5,
            cloning_smoothing: 0.0,
            passes: 1,
            generator_temperature: 1.5,
            generator_smoothing: 0.0,
            generator_fidelity: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Simulator,
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub num_dialogues: usize,
    pub turns: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Simulator,
            num_dialogues: 1000,
            turns: 5,
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Candidate counts; the L = 0 MLE anchor is always added.
    pub ls: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { ls: vec![4, 8, 12, 16] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub improve: ImproveSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        match &self.env {
            EnvConfig::Categorical(c) => c.validate()?,
            EnvConfig::Token(t) => t.validate()?,
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.behavior_quality) || !(d.epsilon > 0.0 && d.epsilon <= 1.0) {
            return Err(Error::Config("data: behavior_quality in [0, 1] and epsilon in (0, 1] required".into()));
        }
        if d.episodes == 0 || d.horizon == Some(0) {
            return Err(Error::Config("data: episodes and horizon must be positive".into()));
        }
        self.fit.coarse.validate().map_err(|e| Error::Config(format!("fit.coarse: {e}")))?;
        self.fit.fine.validate().map_err(|e| Error::Config(format!("fit.fine: {e}")))?;
        let i = &self.improve;
        if i.num_candidates == 0 || i.passes == 0 {
            return Err(Error::Config("improve: num_candidates and passes must be >= 1".into()));
        }
        if !(i.generator_temperature > 0.0) || !(i.generator_smoothing >= 0.0) || !(i.cloning_smoothing >= 0.0) {
            return Err(Error::Config("improve: temperature must be positive, smoothings >= 0".into()));
        }
        if !(0.0..=1.0).contains(&i.generator_fidelity) {
            return Err(Error::Config("improve: generator_fidelity must lie in [0, 1]".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval: seeds must be non-empty".into()));
        }
        if self.eval.num_dialogues == 0 || self.eval.turns == 0 {
            return Err(Error::Config("eval: num_dialogues and turns must be positive".into()));
        }
        if self.sweep.ls.is_empty() || self.sweep.ls.contains(&0) {
            return Err(Error::Config("sweep: ls must be non-empty and positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_toml("out_dir = \"out\"\n").unwrap();
        assert_eq!(cfg.improve.num_candidates, 5);
        assert_eq!(cfg.fit.fine.target_sync_interval, 30);
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(ExperimentConfig::from_toml("out_dir = \"o\"\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("out_dir = \"o\"\n[fit.fine]\nlr = 0.1\n").is_err());
        let err = ExperimentConfig::from_toml("out_dir = \"o\"\n[env]\nkind = \"categorical\"\nstates = 3\n");
        assert!(err.is_err());
    }

    #[test]
    fn token_env_section() {
        let cfg = ExperimentConfig::from_toml("out_dir = \"o\"\n[env]\nkind = \"token\"\nmax_len = 12\n").unwrap();
        assert!(matches!(cfg.env, EnvConfig::Token(ref t) if t.max_len == 12));
    }

    #[test]
    fn empty_seed_list_rejected() {
        assert!(ExperimentConfig::from_toml("out_dir = \"o\"\n[eval]\nseeds = []\n").is_err());
    }
}
