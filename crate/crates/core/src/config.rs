//! Run configuration, readable from a TOML document with one table per stage.
//!
//! ```toml
//! problem = "put-drift"
//!
//! [params]
//! strike = 100.0
//!
//! [grid]
//! horizon = 1.0
//! steps = 50
//!
//! [monte_carlo]
//! paths = 100000
//! seed = 2024
//! ```
//!
//! Missing keys take the defaults below; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::TimeGrid;
use crate::problem::{catalog, ProblemParams, ProblemSpec};
use crate::regression::{RegressionBasis, DEFAULT_CELLS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    pub params: ProblemParams,
    pub grid: GridConfig,
    pub monte_carlo: MonteCarloConfig,
    pub basis: BasisConfig,
    pub penalty: PenaltyConfig,
    pub oracle: OracleConfig,
    pub output: OutputConfig,
    /// Rayon pool size; results do not depend on it.
    pub workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub paths: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub degree: usize,
    pub cells: usize,
    /// Obstacle value as an extra feature; the problem decides when unset.
    pub obstacle_feature: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Penalization levels `n`.
    pub levels: Vec<f64>,
    pub epsilons: Vec<f64>,
    /// Constant intensities evaluated at every level not below them.
    pub constants: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub tree_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write per-path solution CSVs.
    pub dump_solutions: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: "put-drift".into(),
            params: ProblemParams::default(),
            grid: GridConfig::default(),
            monte_carlo: MonteCarloConfig::default(),
            basis: BasisConfig::default(),
            penalty: PenaltyConfig::default(),
            oracle: OracleConfig::default(),
            output: OutputConfig::default(),
            workers: None,
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 50,
        }
    }
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            paths: 100_000,
            seed: 2024,
        }
    }
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            cells: DEFAULT_CELLS,
            obstacle_feature: None,
        }
    }
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            levels: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            epsilons: vec![0.5, 0.1, 0.01],
            constants: vec![0.1, 0.5, 1.0, 2.0],
        }
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { tree_steps: 2000 }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            dump_solutions: false,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        positive("horizon", self.grid.horizon)?;
        if self.grid.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.monte_carlo.paths < 2 {
            return Err(Error::Config("paths must be at least 2".into()));
        }
        if self.basis.cells == 0 {
            return Err(Error::Config("cells must be at least 1".into()));
        }
        if self.oracle.tree_steps == 0 {
            return Err(Error::Config("tree_steps must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.penalty.levels.is_empty() {
            return Err(Error::Config(
                "at least one penalization level is needed".into(),
            ));
        }
        for &n in &self.penalty.levels {
            positive("penalization level", n)?;
        }
        for &c in &self.penalty.constants {
            positive("constant intensity", c)?;
        }
        for &e in &self.penalty.epsilons {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::Config(format!(
                    "epsilon must lie in (0, 1], got {e}"
                )));
            }
        }
        catalog::build(&self.problem, &self.params)?;
        Ok(())
    }

    pub fn spec(&self) -> Result<ProblemSpec> {
        catalog::build(&self.problem, &self.params)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.steps)
    }

    pub fn regression_basis(&self, spec: &ProblemSpec) -> RegressionBasis {
        RegressionBasis::new(
            self.basis.degree,
            self.basis.obstacle_feature.unwrap_or(spec.obstacle_feature),
        )
        .with_cells(self.basis.cells)
    }

    /// Penalization levels in increasing order.
    pub fn sorted_levels(&self) -> Vec<f64> {
        let mut v = self.penalty.levels.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Same configuration on another catalog instance.
    pub fn for_problem(&self, name: &str) -> Self {
        Self {
            problem: name.to_string(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = RunConfig::from_toml_str("problem = \"zero\"\n[grid]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.problem, "zero");
        assert_eq!(cfg.grid.steps, 10);
        assert_eq!(cfg.grid.horizon, 1.0);
        assert_eq!(cfg.monte_carlo.paths, 100_000);
        assert_eq!(cfg.penalty.levels.len(), 7);
    }

    #[test]
    fn invalid_documents_are_rejected() {
        for text in [
            "problem = \"nope\"",
            "[grid]\nsteps = 0",
            "[grid]\nhorizon = -1.0",
            "[penalty]\nepsilons = [1.5]",
            "[penalty]\nlevels = [0.0]",
            "[monte_carlo]\npaths = 1",
            "unknown_key = 3",
        ] {
            assert!(RunConfig::from_toml_str(text).is_err(), "{text}");
        }
    }
}
