//! Run configuration: one TOML document, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use gencost::diagnostics::{DEFAULT_LEVELS, DEFAULT_N_MC};
use gencost::{InverseOptions, MilpOptions, PriorConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n: usize,
    /// Discard records whose schedule sheds load.
    pub drop_shed: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n: 4096, drop_shed: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverseSection {
    pub eps: f64,
    pub max_iter: usize,
    pub commit_tol: f64,
}

impl Default for InverseSection {
    fn default() -> Self {
        let d = InverseOptions::default();
        Self { eps: d.eps, max_iter: d.max_iter, commit_tol: d.commit_tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub n_test: usize,
    pub levels: Vec<f64>,
    pub n_mc: usize,
    /// Posterior predictive simulations per observation.
    pub n_ppc: usize,
    /// Posterior draws written by `infer`.
    pub n_corner: usize,
    /// Test coverage on the dataset's validation split instead of fresh
    /// simulations.
    pub reuse_validation: bool,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            n_test: 1024,
            levels: DEFAULT_LEVELS.to_vec(),
            n_mc: DEFAULT_N_MC,
            n_ppc: 1000,
            n_corner: 4096,
            reuse_validation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// System file; relative paths are resolved against the config file.
    pub system: Option<PathBuf>,
    /// Base seed of every stochastic step. Replaces `train.seed`.
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub prior: PriorConfig,
    pub solver: MilpOptions,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub inverse: InverseSection,
    pub diagnostics: DiagnosticsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: None,
            seed: 0,
            jobs: 1,
            out: PathBuf::from("out"),
            prior: PriorConfig::default(),
            solver: MilpOptions::default(),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            inverse: InverseSection::default(),
            diagnostics: DiagnosticsSection::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub system: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path` (if any), applies `flags` and makes every path absolute.
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self, UsageError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| UsageError(format!("cannot read {}: {e}", p.display())))?;
                let mut cfg: RunConfig =
                    toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new(""));
                cfg.system = cfg.system.map(|s| base.join(s));
                cfg.out = base.join(&cfg.out);
                cfg
            }
            None => RunConfig::default(),
        };
        if let Some(s) = &flags.system {
            cfg.system = Some(s.clone());
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(j) = flags.jobs {
            cfg.jobs = j;
        }
        if let Some(o) = &flags.out {
            cfg.out = o.clone();
        }
        cfg.system = cfg.system.map(|s| fs::canonicalize(&s).unwrap_or_else(|_| absolute(&s)));
        cfg.out = absolute(&cfg.out);
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Checks the sub-configurations; paths are checked where they are used.
    pub fn check(&self) -> Result<(), UsageError> {
        let mut bad = Vec::new();
        if self.jobs == 0 {
            bad.push("jobs must be at least 1".to_string());
        }
        if let Err(e) = self.prior.validate() {
            bad.push(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            bad.push(e.to_string());
        }
        if self.dataset.n == 0 {
            bad.push("dataset.n must be positive".into());
        }
        let d = &self.diagnostics;
        if d.levels.is_empty() || d.levels.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
            bad.push(format!("diagnostics.levels {:?} must be non-empty and inside (0, 1]", d.levels));
        }
        if d.n_test == 0 || d.n_mc == 0 || d.n_ppc == 0 || d.n_corner == 0 {
            bad.push("diagnostics counts must be positive".into());
        }
        let i = &self.inverse;
        if !(i.eps > 0.0) || i.max_iter == 0 || !(i.commit_tol >= 0.0) {
            bad.push("inverse: eps and max_iter must be positive, commit_tol non-negative".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(UsageError(format!("invalid configuration: {}", bad.join("; "))))
        }
    }

    pub fn system_path(&self) -> Result<&Path, UsageError> {
        self.system
            .as_deref()
            .ok_or_else(|| UsageError("no system file: pass --system or set `system` in the config".into()))
    }

    pub fn inverse_options(&self) -> InverseOptions {
        InverseOptions {
            eps: self.inverse.eps,
            max_iter: self.inverse.max_iter,
            commit_tol: self.inverse.commit_tol,
            solver: self.solver,
        }
    }
}

pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
