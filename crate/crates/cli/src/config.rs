//! Experiment configuration: one TOML file covering model, world, training and evaluation.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use sled_core::{AdapterMode, AdapterTrainConfig, EditWorld, ModelConfig, PretrainConfig, WorldSpec};

use crate::error::{CliError, CliResult};

/// Environment variable that replaces every training seed in the config.
pub const SEED_ENV: &str = "SLED_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub world: WorldSpec,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterSections,
    pub eval: EvalConfig,
}

/// Per-mode adapter training settings. Omitted keys take the mode's defaults.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdapterSections {
    pub stlora: AdapterTrainConfig,
    pub gstlora: AdapterTrainConfig,
}

impl Default for AdapterSections {
    fn default() -> Self {
        Self {
            stlora: AdapterTrainConfig::defaults_for(AdapterMode::StLora),
            gstlora: AdapterTrainConfig::defaults_for(AdapterMode::GstLora),
        }
    }
}

impl AdapterSections {
    pub fn for_mode(&self, mode: AdapterMode) -> &AdapterTrainConfig {
        match mode {
            AdapterMode::StLora => &self.stlora,
            AdapterMode::GstLora => &self.gstlora,
        }
    }
}

fn overlay(mode: AdapterMode, raw: Option<serde_json::Value>) -> Result<AdapterTrainConfig, String> {
    let mut base = serde_json::to_value(AdapterTrainConfig::defaults_for(mode)).map_err(|e| e.to_string())?;
    if let Some(raw) = raw {
        let serde_json::Value::Object(fields) = raw else {
            return Err(format!("adapter.{} must be a table", mode.name()));
        };
        let target = base.as_object_mut().expect("struct serializes to an object");
        for (k, v) in fields {
            target.insert(k, v);
        }
    }
    serde_json::from_value(base).map_err(|e| format!("adapter.{}: {e}", mode.name()))
}

impl<'de> Deserialize<'de> for AdapterSections {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            stlora: Option<serde_json::Value>,
            gstlora: Option<serde_json::Value>,
        }
        let raw = Raw::deserialize(de)?;
        Ok(Self {
            stlora: overlay(AdapterMode::StLora, raw.stlora).map_err(serde::de::Error::custom)?,
            gstlora: overlay(AdapterMode::GstLora, raw.gstlora).map_err(serde::de::Error::custom)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of sliders varied together.
    pub gamma: usize,
    /// Values per slider axis; 15 for one slider and 7 otherwise when unset.
    pub delta: Option<usize>,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub steps: usize,
    /// Held-out example and sampling-noise seeds.
    pub seeds: Vec<u64>,
    /// Blocks the token intervention applies to; all when unset.
    pub intervention_layers: Option<Vec<usize>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gamma: 1,
            delta: None,
            alpha_min: -0.5,
            alpha_max: 1.25,
            steps: 20,
            seeds: (0..8).collect(),
            intervention_layers: None,
        }
    }
}

impl EvalConfig {
    pub fn delta_for(&self, gamma: usize) -> usize {
        self.delta.unwrap_or(if gamma == 1 { 15 } else { 7 })
    }

    /// `δ` evenly spaced values over `[alpha_min, alpha_max]`.
    pub fn alphas(&self, gamma: usize) -> Vec<f64> {
        linspace(self.alpha_min, self.alpha_max, self.delta_for(gamma))
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

impl Config {
    pub fn validate(&self) -> sled_core::Result<()> {
        use sled_core::Error;
        self.model.validate()?;
        self.world.validate()?;
        self.world.validate_for_text_len(self.model.text_len)?;
        if self.world.grid != self.model.grid {
            return Err(Error::InvalidConfig("world.grid and model.grid differ".into()));
        }
        let vocab = self.world.vocabulary();
        if vocab.size() > self.model.vocab {
            return Err(Error::InvalidConfig(format!(
                "world needs {} token ids but model.vocab is {}",
                vocab.size(),
                self.model.vocab
            )));
        }
        self.pretrain.validate()?;
        self.adapter.stlora.validate()?;
        self.adapter.gstlora.validate()?;
        let e = &self.eval;
        if e.gamma == 0 || e.gamma > 3 || e.gamma > self.world.atoms {
            return Err(Error::InvalidConfig(format!(
                "eval.gamma {} must be in 1..=3 and at most the {} atoms",
                e.gamma, self.world.atoms
            )));
        }
        if e.delta == Some(0) || e.steps == 0 || e.seeds.is_empty() {
            return Err(Error::InvalidConfig("eval.delta, eval.steps and eval.seeds must be non-empty".into()));
        }
        if !(e.alpha_min.is_finite() && e.alpha_max.is_finite() && e.alpha_min < e.alpha_max) {
            return Err(Error::InvalidConfig("eval needs finite alpha_min < alpha_max".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> sled_core::Result<EditWorld> {
        EditWorld::generate(&self.world)
    }

    /// Hex SHA-256 of the resolved config, embedded in every output.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn apply_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.adapter.stlora.seed = seed;
        self.adapter.gstlora.seed = seed;
    }

    pub fn parse(text: &str, path: &Path) -> CliResult<Config> {
        let config: Config = toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    /// Reads, applies the seed override and validates.
    pub fn load(path: &Path) -> CliResult<Config> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text, path)?;
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={raw} is not an unsigned integer")))?;
            config.apply_seed(seed);
        }
        config.validate().map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    /// Commented default config for `init-config`.
    pub fn default_toml() -> String {
        let body = toml::to_string_pretty(&Config::default()).expect("default config serializes");
        format!(
            "# Experiment configuration. Every key is optional; omitted keys take the values below.\n\
             # [model]          transformer size and text length\n\
             # [world]          synthetic edit world: atoms, grid, background\n\
             # [pretrain]       flow-matching training of the base editor\n\
             # [adapter.*]      slider training per adapter mode\n\
             # [eval]           sweeps: gamma sliders, delta values per axis\n\
             #                  (15 when gamma = 1, else 7), alpha range, Euler steps, seeds\n\
             # {SEED_ENV} in the environment replaces every training seed.\n\n{body}"
        )
    }
}
