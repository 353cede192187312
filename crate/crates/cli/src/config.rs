use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mmvae::vae::DEFAULT_TEMPERATURE;
use mmvae::{CorpusConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub tempo_bpm: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: DEFAULT_TEMPERATURE,
            tempo_bpm: 120.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run can be configured with, loaded from one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub sampling: SamplingConfig,
    /// Per-attribute "has it" thresholds; missing ones use the corpus median.
    pub attribute_thresholds: BTreeMap<String, f64>,
    pub paths: PathsConfig,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        cfg.model.validate().map_err(|e| CliError::usage(e.to_string()))?;
        cfg.train.validate().map_err(|e| CliError::usage(e.to_string()))?;
        cfg.corpus
            .chords
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Flag value, else config value, else fresh entropy (printed).
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> u64 {
        let seed = flag.or(self.seed).unwrap_or_else(|| {
            let s = rand::random::<u64>();
            eprintln!("no seed given; using seed {s}");
            s
        });
        self.seed = Some(seed);
        seed
    }

    /// Write the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        let path = dir.join("run_config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}
