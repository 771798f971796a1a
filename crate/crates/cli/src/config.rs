use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// One run: the problem, how to solve it and where its data and outputs
/// live. Every table rejects unknown keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub hedging: HedgingSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Built-in problem families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// Two-period tracking problem; finite ambiguity sets without a
    /// radius, order-1 Wasserstein balls with one.
    Tracking {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        radius: Option<f64>,
    },
    /// Random finite instance with enumerable strategies.
    RandomFinite { instance: u64 },
    /// Wasserstein-ball instance with a known true kernel.
    WassersteinAudit { instance: u64 },
    /// Exponential-family instance with a known true parameter.
    ParametricAudit { instance: u64 },
    /// Option hedging on the returns of the `[data]` table.
    Hedging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    Algorithm1,
    Algorithm2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub method: Method,
    pub candidates: usize,
    pub atoms: usize,
    pub max_states: usize,
    /// When set, Wasserstein balls are solved exactly over measures on a
    /// uniform grid with this many intervals across `[-C, C]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_ball: Option<usize>,
    /// Replace every ambiguity set by the singleton of its reference law.
    pub reference_only: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            method: Method::Exact,
            candidates: 4,
            atoms: 8,
            max_states: 2_000_000,
            grid_ball: None,
            reference_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingChoice {
    Uniform,
    ActionGrid,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub n_measures: usize,
    pub n_mc: usize,
    pub iter_a: usize,
    pub iter_psi: usize,
    /// Points of the dual support grid.
    pub z_points: usize,
    /// Keep one uniform grid on `[-C, C]` (one-dimensional bounded states)
    /// instead of redrawing it every iteration.
    pub z_fixed: bool,
    pub exact_discrete: bool,
    pub lambda_init: f64,
    pub eval_samples: usize,
    /// Ignored for hedging problems, which sample wealth and positions.
    pub sampling: SamplingChoice,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            lr: 3e-3,
            batch: 64,
            n_measures: 2,
            n_mc: 32,
            iter_a: 300,
            iter_psi: 300,
            z_points: 32,
            z_fixed: true,
            exact_discrete: false,
            lambda_init: 1.0,
            eval_samples: 2048,
            sampling: SamplingChoice::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Network dump written by `train`; without it the exact solution is
    /// evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub members: usize,
    pub paths: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            model: None,
            members: 4,
            paths: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    #[serde(default)]
    pub mu: f64,
    pub sigma: f64,
    pub days: usize,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default = "trading_days")]
    pub trading_days: usize,
    pub clip: f64,
}

fn one() -> usize {
    1
}

fn trading_days() -> usize {
    252
}

/// Return data: a CSV file or synthetic geometric Brownian motion, split
/// into a training and a test period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
    /// First date of the test period.
    pub split_date: String,
    /// Declared bound `C` on absolute returns; rows beyond it are rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HedgingSection {
    pub horizon: usize,
    pub bound_c: f64,
    /// Wasserstein radius; 0 trains no robust hedge.
    pub radius: f64,
    /// Bandwidth of the kernel-weighted reference; the plain empirical
    /// measure when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub trading_days: usize,
    /// Volatility of the delta hedge; estimated on the training period
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annual_vol: Option<f64>,
    /// With several return columns, hedge a basket call on all of them
    /// instead of a call on each column with pooled training returns.
    pub basket: bool,
}

impl Default for HedgingSection {
    fn default() -> Self {
        Self {
            horizon: 10,
            bound_c: 0.08,
            radius: 0.0,
            beta: None,
            trading_days: 252,
            annual_vol: None,
            basket: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub tolerance: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self { tolerance: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub budget: u64,
    pub tolerance: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            budget: 200_000,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and validates a TOML document. Relative data paths are
    /// resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if let Some(d) = cfg.data.as_mut() {
            if let Some(p) = d.csv.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if let Some(p) = cfg.evaluate.model.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, String> {
        toml::to_string(self).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if let Some(d) = &self.data {
            match (&d.csv, &d.synthetic) {
                (Some(p), None) => {
                    if !p.is_file() {
                        return Err(format!("data.csv: {} does not exist", p.display()));
                    }
                }
                (None, Some(_)) => {}
                _ => return Err("data: give exactly one of `csv` and `synthetic`".into()),
            }
        }
        if matches!(self.problem, ProblemConfig::Hedging) && self.data.is_none() {
            return Err("problem.kind = \"hedging\" needs a [data] table".into());
        }
        if let Some(p) = &self.evaluate.model {
            if !p.is_file() {
                return Err(format!("evaluate.model: {} does not exist", p.display()));
            }
        }
        if self.hedging.radius < 0.0 {
            return Err("hedging.radius must be nonnegative".into());
        }
        Ok(())
    }
}
