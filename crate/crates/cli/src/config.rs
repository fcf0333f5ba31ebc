//! Experiment configuration: a versioned TOML document. Unknown keys are
//! rejected and everything is validated before any computation starts.

use std::path::{Path, PathBuf};

use mode_core::engine::{AdaptationConfig, Method, ModelConfig, SourceTrainConfig};
use mode_core::scenario::{default_sda_domains, default_target_domains, DomainSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "MODE_CTTA_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    #[default]
    Cds,
    Cgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source_samples: usize,
    /// Source samples copied into each SDA domain.
    pub sda_samples: usize,
    /// Stream samples per target domain and round.
    pub per_domain: usize,
    pub separation: f64,
    /// Standard deviation of CGS timestamps.
    pub cgs_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source_samples: 2000, sda_samples: 1000, per_domain: 400, separation: 3.0, cgs_std: 200.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub run_id: String,
    #[serde(default)]
    pub scenario: ScenarioKind,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Methods run from the same initialized model next to `adaptation.method`.
    #[serde(default)]
    pub baselines: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub source: SourceTrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// `adaptation.seed` is replaced by each entry of `seeds`.
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    #[serde(default = "default_sda_domains")]
    pub sda_domains: Vec<DomainSpec>,
    #[serde(default = "default_target_domains")]
    pub target_domains: Vec<DomainSpec>,
}

fn default_rounds() -> usize {
    10
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {})", self.version, CONFIG_VERSION));
        }
        if self.run_id.is_empty() || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return bad(format!("run_id {:?} must be nonempty ASCII letters, digits, '-' or '_'", self.run_id));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let methods = self.methods();
        if (1..methods.len()).any(|i| methods[..i].contains(&methods[i])) {
            return bad("baselines repeat a method".into());
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.adaptation.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.classes > self.model.input_dim {
            return bad("model.classes must not exceed model.input_dim".into());
        }
        if self.sda_domains.len() != self.model.domains {
            return bad(format!("{} sda_domains for model.domains = {}", self.sda_domains.len(), self.model.domains));
        }
        if !self.sda_domains[0].is_identity() {
            return bad("sda_domains[0] must be the identity".into());
        }
        if self.target_domains.is_empty() {
            return bad("target_domains must not be empty".into());
        }
        for d in self.sda_domains.iter().chain(&self.target_domains) {
            if d.name.is_empty() || !d.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return bad(format!("domain name {:?} must be nonempty ASCII letters, digits, '-' or '_'", d.name));
            }
        }
        let d = &self.data;
        if d.source_samples < self.model.classes || d.sda_samples == 0 || d.sda_samples > d.source_samples {
            return bad("need classes <= source_samples and 0 < sda_samples <= source_samples".into());
        }
        if d.per_domain == 0 || !(d.separation.is_finite()) || !(d.cgs_std >= 0.0) {
            return bad("per_domain must be positive, separation finite and cgs_std nonnegative".into());
        }
        if self.source.epochs == 0 || self.source.batch == 0 || !(self.source.lr > 0.0) {
            return bad("source training needs positive epochs, batch and lr".into());
        }
        Ok(())
    }

    /// The main method followed by the baselines.
    pub fn methods(&self) -> Vec<Method> {
        let mut m = vec![self.adaptation.method];
        m.extend(&self.baselines);
        m
    }

    /// SHA-256 of the canonical JSON encoding, output location excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Output root: the environment override, else `output_dir`, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.run_id)
    }

    pub fn adaptation_for(&self, seed: u64, method: Method) -> AdaptationConfig {
        AdaptationConfig { seed, method, ..self.adaptation.clone() }
    }
}
