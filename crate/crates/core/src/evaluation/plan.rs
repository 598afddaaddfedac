use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{Curriculum, SELECTION_METRICS};
use crate::dynamics::Env;
use crate::error::{Error, Result};
use crate::inverse_dynamics::IdConfig;

pub const METRIC_NAMES: &[&str] = &["SAE", "CAE", "survival", "reward", "completion"];

/// Which trajectory the task metrics are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    /// The sampled states as returned.
    #[default]
    Planned,
    /// Open-loop rollout of the sampled actions, or of recovered actions
    /// for state-only models.
    Executed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Label used in every report row.
    pub name: String,
    pub checkpoint: PathBuf,
    /// `P`, `Pref`, `PA`, `PSA` or `none`; absent keeps the checkpoint default.
    #[serde(default)]
    pub projector: Option<String>,
    /// `pre`, `mid`, `post` or `off`; absent keeps the checkpoint default.
    #[serde(default)]
    pub curriculum: Option<String>,
    #[serde(default)]
    pub lambda_ref: Option<f64>,
    /// Shrink fraction; turns on action guidance for `P` and `Pref`.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Correction policy file for `PSA` when the checkpoint carries none.
    #[serde(default)]
    pub correction_policy: Option<PathBuf>,
    #[serde(default)]
    pub sigma_min: Option<f64>,
    #[serde(default)]
    pub sigma_max: Option<f64>,
}

impl ModelConfig {
    pub fn new(name: &str, checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            name: name.to_string(),
            checkpoint: checkpoint.into(),
            projector: None,
            curriculum: None,
            lambda_ref: None,
            delta: None,
            correction_policy: None,
            sigma_min: None,
            sigma_max: None,
        }
    }

    pub fn with_projector(mut self, p: &str) -> Self {
        self.projector = Some(p.to_string());
        self
    }

    pub fn with_curriculum(mut self, c: &str) -> Self {
        self.curriculum = Some(c.to_string());
        self
    }

    pub(crate) fn curriculum(&self) -> Result<Option<Curriculum>> {
        let base = self.curriculum.as_deref().map(Curriculum::by_name).transpose()?;
        if self.sigma_min.is_none() && self.sigma_max.is_none() {
            return Ok(base);
        }
        let b = base.unwrap_or_default();
        Curriculum::custom(self.sigma_min.unwrap_or(b.sigma_min), self.sigma_max.unwrap_or(b.sigma_max)).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub env: String,
    #[serde(default)]
    pub horizon: Option<usize>,
    pub configs: Vec<ModelConfig>,
    pub n_initial_states: usize,
    pub samples_per_state: usize,
    pub metrics: Vec<String>,
    pub seeds: Vec<u64>,
    /// Also aggregate the best sample per initial state under this metric.
    #[serde(default)]
    pub selection: Option<String>,
    #[serde(default)]
    pub scoring: Scoring,
    #[serde(default)]
    pub inverse_dynamics: IdConfig,
}

impl ExperimentPlan {
    pub fn env(&self) -> Result<Env> {
        let env = Env::by_name(&self.env)?;
        Ok(match self.horizon {
            Some(h) => env.with_horizon(h),
            None => env,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.env()?;
        if self.configs.is_empty() {
            return Err(Error::Config("plan lists no model configs".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("plan lists no metrics".into()));
        }
        for m in &self.metrics {
            if !METRIC_NAMES.contains(&m.as_str()) {
                return Err(Error::unknown("metric", m, METRIC_NAMES));
            }
        }
        if let Some(s) = &self.selection {
            if !SELECTION_METRICS.contains(&s.as_str()) {
                return Err(Error::unknown("selection metric", s, SELECTION_METRICS));
            }
        }
        if self.n_initial_states == 0 || self.samples_per_state == 0 || self.seeds.is_empty() {
            return Err(Error::Config("plan needs initial states, samples and seeds".into()));
        }
        let mut names: Vec<&str> = self.configs.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("model config names must be unique".into()));
        }
        for c in &self.configs {
            c.curriculum()?;
        }
        self.inverse_dynamics.validate()
    }

    pub fn wants(&self, metric: &str) -> bool {
        self.metrics.iter().any(|m| m == metric)
    }

    /// Resolve relative checkpoint and policy paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for c in &mut self.configs {
            if c.checkpoint.is_relative() {
                c.checkpoint = base.join(&c.checkpoint);
            }
            if let Some(p) = &mut c.correction_policy {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}
