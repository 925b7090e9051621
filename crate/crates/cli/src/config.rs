use std::path::{Path, PathBuf};

use gridmtl::datagen::{ContingencyPolicy, SamplerConfig};
use gridmtl::dynamics::SimConfig;
use gridmtl::grid::{self, Network};
use gridmtl::labeling::LabelThresholds;
use gridmtl::mtl::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that replaces the `seed` field when set.
pub const SEED_ENV: &str = "GRIDMTL_SEED";

fn one() -> usize {
    1
}

fn default_test_fraction() -> f64 {
    0.2
}

/// One run, read from a strict JSON file. Seeds inside the nested blocks are
/// derived from `seed` and must be left unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// A JSON network file, relative to the config file, or `fixture:<name>`
    /// with name `three_bus`, `nine_bus` or `thirty_nine_bus`.
    pub grid_path: String,
    /// Base topology plus `topologies - 1` single-line-outage variants.
    #[serde(default = "one")]
    pub topologies: usize,
    #[serde(default)]
    pub contingencies: ContingencyPolicy,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub labels: LabelThresholds,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Load draws per topology; each is labelled under every contingency.
    pub n_per_case: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Relative to the config file.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

/// Seeds handed to each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub global: u64,
    pub sampler: u64,
    pub model: u64,
    pub train: u64,
    pub split: u64,
}

impl Seeds {
    pub fn from_global(g: u64) -> Self {
        Seeds {
            global: g,
            sampler: g,
            model: g.wrapping_add(1),
            train: g.wrapping_add(2),
            split: g.wrapping_add(3),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    /// Reads, validates and resolves paths against the file's directory.
    /// `GRIDMTL_SEED` takes precedence over `seed`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if !cfg.grid_path.starts_with("fixture:") && Path::new(&cfg.grid_path).is_relative() {
            cfg.grid_path = base.join(&cfg.grid_path).to_string_lossy().into_owned();
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.topologies == 0 {
            return bad("topologies must be at least 1".into());
        }
        if self.n_per_case == 0 {
            return bad("n_per_case must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)".into());
        }
        for (name, seed) in [
            ("sampler.seed", self.sampler.seed),
            ("model.seed", self.model.seed),
            ("train.seed", self.train.seed),
        ] {
            if seed != 0 {
                return bad(format!("{name} is derived from the global seed and must not be set"));
            }
        }
        let wrap = |block: &str, e: String| CliError::Config(format!("{block}: {e}"));
        self.sampler.validate().map_err(|e| wrap("sampler", e.to_string()))?;
        self.labels.validate().map_err(|e| wrap("labels", e.to_string()))?;
        self.sim.validate().map_err(|e| wrap("sim", e.to_string()))?;
        self.model.validate().map_err(|e| wrap("model", e.to_string()))?;
        self.train.validate().map_err(|e| wrap("train", e.to_string()))?;
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_global(self.seed)
    }

    /// Copy with the stage seeds filled in.
    pub fn resolved(mut self) -> Self {
        let s = self.seeds();
        self.sampler.seed = s.sampler;
        self.model.seed = s.model;
        self.train.seed = s.train;
        self
    }

    /// Same configuration under another global seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.resolved()
    }

    pub fn network(&self) -> Result<Network, CliError> {
        match self.grid_path.strip_prefix("fixture:") {
            Some("three_bus") => Ok(grid::fixtures::three_bus()),
            Some("nine_bus") => Ok(grid::fixtures::nine_bus()),
            Some("thirty_nine_bus") => Ok(grid::fixtures::thirty_nine_bus()),
            Some(other) => Err(CliError::Config(format!("unknown fixture {other:?}"))),
            None => grid::load_network(&self.grid_path)
                .map_err(|e| CliError::Config(format!("grid {}: {e}", self.grid_path))),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}
