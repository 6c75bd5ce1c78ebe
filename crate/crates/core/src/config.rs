//! Declarative run configuration shared by every pipeline stage.
//!
//! A configuration is read from TOML or JSON; any field left out takes its
//! default. The resolved configuration is written next to every result and
//! its SHA-256 hash is embedded in each output file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::car::{McmcSettings, Priors};
use crate::cluster::{LinkageMethod, MergeTree};
use crate::risk::DEFAULT_ZERO_ADJUST;
use crate::select::{DevianceConvention, PlugIn, SweepSettings};
use crate::sim::{SimScenario, TemplateSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid TOML in {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("invalid JSON in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Long-format counts CSV `id,period,observed,expected`.
    pub counts: Option<PathBuf>,
    /// Edge list CSV `from,to`.
    pub graph: Option<PathBuf>,
    /// GeoJSON polygons; used instead of `graph` when set.
    pub geojson: Option<PathBuf>,
    /// Id list CSV fixing the unit order; otherwise the order comes from the
    /// polygons or from first appearance in the counts.
    pub ids: Option<PathBuf>,
    pub study_period: String,
    /// Point contact counts as adjacency when deriving it from polygons.
    pub queen: bool,
    pub id_property: String,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            counts: None,
            graph: None,
            geojson: None,
            ids: None,
            study_period: crate::sim::STUDY_PERIOD.to_string(),
            queen: false,
            id_property: "id".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub linkage: LinkageMethod,
    /// Seed for breaking exact ties between candidate merges.
    pub seed: u64,
    pub zero_adjust: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            linkage: LinkageMethod::default(),
            seed: 0,
            zero_adjust: DEFAULT_ZERO_ADJUST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Largest cluster count fitted; the range starts at the smallest
    /// reachable count.
    pub kmax: usize,
    /// Explicit candidate counts; overrides `kmax` when non-empty.
    pub k_values: Vec<usize>,
    pub mcmc: McmcSettings,
    pub priors: Priors,
    pub plug_in: PlugIn,
    pub convention: DevianceConvention,
    pub near_tie_delta: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        let sweep = SweepSettings::default();
        Self {
            kmax: 100,
            k_values: Vec::new(),
            mcmc: sweep.mcmc,
            priors: sweep.priors,
            plug_in: sweep.plug_in,
            convention: sweep.convention,
            near_tie_delta: sweep.near_tie_delta,
        }
    }
}

impl SelectionConfig {
    /// Candidate counts for a tree, clipped to what the tree can reach.
    pub fn k_values(&self, tree: &MergeTree) -> Vec<usize> {
        let lo = tree.min_clusters().max(1);
        let hi = tree.n();
        if self.k_values.is_empty() {
            (lo..=hi.min(self.kmax)).collect()
        } else {
            let mut ks: Vec<usize> = self.k_values.iter().copied().filter(|k| (lo..=hi).contains(k)).collect();
            ks.sort_unstable();
            ks.dedup();
            ks
        }
    }

    pub fn sweep_settings(&self, tree: &MergeTree, threads: Option<usize>) -> SweepSettings {
        SweepSettings {
            k_values: self.k_values(tree),
            mcmc: self.mcmc,
            priors: self.priors,
            plug_in: self.plug_in,
            convention: self.convention,
            near_tie_delta: self.near_tie_delta,
            threads,
        }
    }
}

/// Where the simulation template comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemplateSource {
    /// A single cluster with mean zero.
    Flat,
    /// Four quadrant blocks, means in top-left, top-right, bottom-left,
    /// bottom-right order.
    Quadrants { means: [f64; 4] },
    Blocks(TemplateSpec),
    /// A JSON file holding a block template.
    File { path: PathBuf },
}

impl Default for TemplateSource {
    fn default() -> Self {
        TemplateSource::Quadrants {
            means: [0.0, 0.6, -0.6, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub rows: usize,
    pub cols: usize,
    pub template: TemplateSource,
    pub c: f64,
    pub rho: f64,
    pub tau: f64,
    /// Constant expected count for every unit and period.
    pub expected: f64,
    pub noise: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            rows: 12,
            cols: 12,
            template: TemplateSource::default(),
            c: 1.0,
            rho: SimScenario::DEFAULT_RHO,
            tau: SimScenario::DEFAULT_TAU,
            expected: SimScenario::DEFAULT_EXPECTED,
            noise: SimScenario::DEFAULT_NOISE.to_vec(),
            replicates: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Score risk surfaces by RMSE of log-risk instead of risk.
    pub log_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads for the sweep; does not affect results and is left out
    /// of the hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub input: InputConfig,
    pub clustering: ClusteringConfig,
    pub selection: SelectionConfig,
    pub simulation: SimulationConfig,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    /// Reads a TOML file, or JSON when the extension is `.json`.
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|source| ConfigError::Json {
                path: path.to_path_buf(),
                source,
            })
        } else {
            toml::from_str(&text).map_err(|source| ConfigError::Toml {
                path: path.to_path_buf(),
                source,
            })
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.threads == Some(0) {
            return bad("threads must be at least 1");
        }
        if !(self.clustering.zero_adjust > 0.0) {
            return bad("clustering.zero_adjust must be positive");
        }
        if self.selection.kmax == 0 && self.selection.k_values.is_empty() {
            return bad("selection.kmax must be at least 1");
        }
        if !(self.selection.near_tie_delta >= 0.0) {
            return bad("selection.near_tie_delta must be non-negative");
        }
        let s = &self.simulation;
        if s.rows == 0 || s.cols == 0 {
            return bad("simulation grid must have at least one row and column");
        }
        if !(s.expected > 0.0 && s.expected.is_finite()) {
            return bad("simulation.expected must be positive");
        }
        Ok(())
    }

    /// The configuration as it takes part in the hash: everything except
    /// the thread count.
    fn hashed(&self) -> Self {
        Self {
            threads: None,
            ..self.clone()
        }
    }

    /// Pretty JSON of the resolved configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.hashed()).expect("config serialises")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.hashed()).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
