//! Experiment configuration (TOML). Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use duca_core::engine::TrackingUpdate;
use duca_core::Variant;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot emit config: {0}")]
    Emit(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub n_nodes: usize,
    /// Explicit edge list; when absent a random connected graph is drawn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_edges: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Load a serialized instance instead of generating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_q_range")]
    pub q_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingConfig {
    pub variant: Variant,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub tuning: BTreeMap<String, f64>,
    /// Multiplies `P_H̃` after construction; anything above 1 breaks
    /// `P_H ⪰ P_H̃`. Diagnostic use only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_htilde_scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingConfig {
    Tracking,
    StaleZ,
}

impl From<TrackingConfig> for TrackingUpdate {
    fn from(t: TrackingConfig) -> Self {
        match t {
            TrackingConfig::Tracking => TrackingUpdate::Tracking,
            TrackingConfig::StaleZ => TrackingUpdate::StaleZ,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_tol_inner")]
    pub tol_inner: f64,
    #[serde(default = "default_max_inner")]
    pub max_inner_iters: usize,
    #[serde(default = "default_tracking")]
    pub tracking: TrackingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_oracle_tol")]
    pub tol: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    /// Reuse a stored certificate instead of solving.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub graph: GraphConfig,
    #[serde(default = "ProblemConfig::default")]
    pub problem: ProblemConfig,
    pub setting: Vec<SettingConfig>,
    #[serde(default = "RunConfig::default")]
    pub run: RunConfig,
    #[serde(default = "OracleConfig::default")]
    pub oracle: OracleConfig,
}

fn default_dim() -> usize {
    3
}
fn one() -> usize {
    1
}
fn default_p() -> usize {
    5
}
fn default_q_range() -> f64 {
    1.0
}
fn default_rho() -> f64 {
    1.0
}
fn default_alphas() -> Vec<f64> {
    vec![0.0]
}
fn default_rounds() -> usize {
    1000
}
fn default_tol_inner() -> f64 {
    duca_core::localsolver::DEFAULT_TOL
}
fn default_max_inner() -> usize {
    duca_core::localsolver::DEFAULT_MAX_ITERS
}
fn default_tracking() -> TrackingConfig {
    TrackingConfig::Tracking
}
fn default_oracle_tol() -> f64 {
    1e-9
}
fn default_max_outer() -> usize {
    500
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig { path: None, dim: default_dim(), m: 1, p: default_p(), seed: 0, q_range: default_q_range() }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rounds: default_rounds(),
            tol_inner: default_tol_inner(),
            max_inner_iters: default_max_inner(),
            tracking: default_tracking(),
        }
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { tol: default_oracle_tol(), max_outer: default_max_outer(), certificate: None }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
    pub tol_inner: Option<f64>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        let mut cfg = Self::parse(&text)?;
        // Relative data paths are resolved against the config's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(p) = cfg.problem.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = cfg.oracle.certificate.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn check(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.graph.n_nodes == 0 {
            return bad("graph.n_nodes must be positive".into());
        }
        if self.graph.edges.is_none() && self.graph.n_edges.is_none() {
            return bad("graph needs either edges or n_edges".into());
        }
        if self.setting.is_empty() {
            return bad("at least one [[setting]] is required".into());
        }
        for s in &self.setting {
            if !(s.rho > 0.0) {
                return bad(format!("{}: rho must be positive", s.variant));
            }
            if s.alphas.is_empty() || s.alphas.iter().any(|a| !(*a >= 0.0)) {
                return bad(format!("{}: alphas must be a nonempty list of nonnegative numbers", s.variant));
            }
        }
        if self.run.rounds == 0 {
            return bad("run.rounds must be at least 1".into());
        }
        if !(self.run.tol_inner > 0.0) || !(self.oracle.tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(r) = o.rounds {
            self.run.rounds = r;
        }
        if let Some(s) = o.seed {
            self.graph.seed = s;
            self.problem.seed = s;
        }
        if let Some(t) = o.tol_inner {
            self.run.tol_inner = t;
        }
        self.check()
    }

    /// Canonical form: defaults filled in, edges sorted as `(min, max)`.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        if let Some(edges) = c.graph.edges.as_mut() {
            for e in edges.iter_mut() {
                if e[0] > e[1] {
                    e.swap(0, 1);
                }
            }
            edges.sort_unstable();
        }
        c
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(&self.normalized())?)
    }

    /// SHA-256 of the canonical TOML text.
    pub fn digest(&self) -> Result<String, ConfigError> {
        let text = self.to_toml()?;
        let hash = Sha256::digest(text.as_bytes());
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }
}
