use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use csta::dataio::SyntheticConfig;
use csta::metrics::CvConfig;
use csta::model::ModelConfig;
use csta::trainer::{EvalSettings, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything a run needs, merged from the config file and command-line flags.
/// The resolved value is written next to the outputs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Overrides `gen.seed` and `cv.seed` when set.
    pub seed: Option<u64>,
    pub gen: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub cv: CvConfig,
    pub macs: MacsSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacsSection {
    /// Sequence length the count is parameterized on.
    pub frames: usize,
}

impl Default for MacsSection {
    fn default() -> Self {
        Self { frames: 120 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file `{}`", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("malformed config file `{}`: {e}", path.display()))
    }

    /// Propagate the top-level seed into the sections that consume it.
    pub fn resolve(&mut self) {
        if let Some(seed) = self.seed {
            self.gen.seed = seed;
            self.cv.seed = seed;
        }
    }

    pub fn data_dir(&self) -> Result<&Path> {
        let Some(dir) = self.data.as_deref() else {
            bail!("no dataset given: pass --data or set `data` in the config file");
        };
        if !dir.is_dir() {
            bail!("dataset directory `{}` does not exist", dir.display());
        }
        Ok(dir)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("no output directory given: pass --out or set `out` in the config file")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).context("cannot serialize the resolved config")?;
        fs::write(dir.join("config.toml"), text)
            .with_context(|| format!("cannot write config into `{}`", dir.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig {
            seed: Some(9),
            data: Some("d".into()),
            ..RunConfig::default()
        };
        cfg.train.max_grad_norm = Some(5.0);
        cfg.resolve();
        let back: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back.cv.seed, 9);
        assert_eq!(back.gen.seed, 9);
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.eval, cfg.eval);
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nepochs = 3\n[model]\nreduction = 4\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.model.reduction, 4);
        assert_eq!(cfg.cv.folds, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[trian]\nepochs = 3\n").is_err());
    }
}
