//! Run configuration: one JSON file per experiment, with per-subcommand sections.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use scot::dro::{BallKind, RadiusParams};
use scot::relaxed::RelaxedSolveConfig;
use scot::scm::{model_from_json, Space};
use scot::{Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// SCM description in the model format.
    pub model: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Space of the sample files, `feature` (default) or `exogenous`.
    #[serde(default)]
    pub space: SpaceName,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub cost: CostSection,
    /// Relaxed solver settings; `p` defaults to the cost exponent.
    pub solver: Option<Value>,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub ambiguity: AmbiguitySection,
    #[serde(default)]
    pub radius: RadiusParams,
    #[serde(default)]
    pub rates: RatesSection,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub fit: FitSection,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceName {
    #[default]
    Feature,
    Exogenous,
}

impl From<SpaceName> for Space {
    fn from(s: SpaceName) -> Space {
        match s {
            SpaceName::Feature => Space::Feature,
            SpaceName::Exogenous => Space::Exogenous,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default = "two")]
    pub p: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        CostSection { p: 2.0 }
    }
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    /// Regularization values; more than one runs a sweep.
    pub eps: Option<Vec<f64>>,
    /// Read the regularization values as multiples of the mean exogenous cost.
    #[serde(default)]
    pub eps_relative: bool,
    /// Where to write the optimal plan of a single solve.
    pub plan_out: Option<PathBuf>,
    /// Sandwich tolerance reported with sweeps.
    #[serde(default = "sandwich_tol")]
    pub sandwich_tol: f64,
}

fn sandwich_tol() -> f64 {
    1e-6
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(default)]
    pub space: SpaceName,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmbiguitySection {
    /// Coefficient of the two-node demo, used when no model is given.
    pub alpha: f64,
    pub deltas: Vec<f64>,
    pub psi: Vec<String>,
    pub kinds: Vec<BallKind>,
    pub mc_count: usize,
    /// Quantile atoms per exogenous axis.
    pub grid: usize,
    /// Gaussian noise standard deviations; defaults to one per node.
    pub sd: Option<Vec<f64>>,
}

impl Default for AmbiguitySection {
    fn default() -> Self {
        AmbiguitySection {
            alpha: 0.5,
            deltas: vec![0.1, 0.2, 0.3, 0.4],
            psi: ["abs_diff", "sq_diff", "abs_sum", "sq_sum", "sumsq"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            kinds: vec![BallKind::Classical, BallKind::Structural, BallKind::GcausalMc],
            mc_count: 10_000,
            grid: 20,
            sd: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesSection {
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    pub trials: usize,
    pub p: Option<f64>,
}

impl Default for RatesSection {
    fn default() -> Self {
        RatesSection {
            n_list: vec![25, 50, 100, 200],
            trials: 20,
            p: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub scales: Vec<f64>,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection {
            scales: vec![0.2, 0.1, 0.05, 0.01, 0.0],
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// Treat the configured model as the generating truth and report the sup gap.
    #[serde(default)]
    pub synthetic: bool,
}

/// A parsed config together with its raw bytes and location.
pub struct Loaded {
    pub cfg: RunConfig,
    pub raw: Vec<u8>,
    pub dir: PathBuf,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let shown = path.display().to_string();
    let raw = std::fs::read(path).map_err(|e| Error::Invalid {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    let cfg: RunConfig = serde_json::from_slice(&raw).map_err(|e| Error::Invalid {
        path: shown,
        message: e.to_string(),
    })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { cfg, raw, dir })
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }

    pub fn required(&self, field: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
        p.as_ref().map(|p| self.resolve(p)).ok_or_else(|| Error::Invalid {
            path: field.to_string(),
            message: "missing field".to_string(),
        })
    }

    pub fn model(&self) -> Result<Option<scot::scm::ScmModel>> {
        let Some(path) = &self.cfg.model else {
            return Ok(None);
        };
        let path = self.resolve(path);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Invalid {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        model_from_json(&text).map(Some)
    }

    pub fn require_model(&self) -> Result<scot::scm::ScmModel> {
        self.model()?.ok_or_else(|| Error::Invalid {
            path: "model".to_string(),
            message: "missing field".to_string(),
        })
    }

    /// Solver settings with `p` taken from the cost section unless set.
    pub fn solver(&self) -> Result<RelaxedSolveConfig> {
        let mut value = self.cfg.solver.clone().unwrap_or_else(|| Value::Object(Default::default()));
        let obj = value.as_object_mut().ok_or_else(|| Error::Invalid {
            path: "solver".to_string(),
            message: "expected an object".to_string(),
        })?;
        obj.entry("p").or_insert(self.cfg.cost.p.into());
        serde_json::from_value(value).map_err(|e| Error::Invalid {
            path: "solver".to_string(),
            message: e.to_string(),
        })
    }
}
