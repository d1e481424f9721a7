//! Experiment configuration. The raw JSON is checked against the published
//! schema first, then deserialized; unknown keys are rejected at both steps.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use stein_core::aggregation::RateConfig;
use stein_core::discrete::{BaseDistribution, DiscreteModel, SurrogateMode};
use stein_core::gfsvgd::{GfOptions, WeightMode};
use stein_core::gof::GofOptions;
use stein_core::kernels::KernelSpec;
use stein_core::mat::Mat;
use stein_core::models::{
    bernoulli_rbm_target, categorical_target, gauss_bernoulli_rbm_target, gaussian_target, gmm_target, ising_target, BernoulliRbm,
    ContinuousTarget, GaussBernoulliRbm, Gmm, Ising, Proposal,
};
use stein_core::rng::stream;
use stein_core::steinis::DetMode;
use stein_core::svgd::StepSchedule;
use stein_core::SteinError;

pub const SCHEMA: &str = include_str!("../schema/config.schema.json");

#[derive(Debug)]
pub enum ConfigError {
    Json(String),
    Schema(String),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Json(m) => write!(f, "malformed JSON: {m}"),
            ConfigError::Schema(m) => write!(f, "schema violation: {m}"),
            ConfigError::Invalid(m) => write!(f, "{m}"),
        }
    }
}

/// Validates `raw` against the schema and parses it.
pub fn parse(raw: &str) -> Result<ExperimentConfig, ConfigError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| ConfigError::Json(e.to_string()))?;
    let schema: Value = serde_json::from_str(SCHEMA).expect("bundled schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    if let Some(err) = validator.iter_errors(&value).next() {
        return Err(ConfigError::Schema(format!("{err} at '{}'", err.instance_path())));
    }
    serde_json::from_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svgd: Option<SvgdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gfsvgd: Option<GfSvgdConfig>,
    #[serde(default, rename = "agf-svgd", skip_serializing_if = "Option::is_none")]
    pub agf_svgd: Option<AgfSvgdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steinis: Option<SteinIsSection>,
    #[serde(default, rename = "path-logz", skip_serializing_if = "Option::is_none")]
    pub path_logz: Option<PathSection>,
    #[serde(default, rename = "discrete-sample", skip_serializing_if = "Option::is_none")]
    pub discrete_sample: Option<DiscreteSampleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gof: Option<GofSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbis: Option<BbisSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<RateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
}

impl ExperimentConfig {
    /// Names of the command sections present in the file.
    pub fn sections(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut add = |present: bool, name| {
            if present {
                out.push(name)
            }
        };
        add(self.svgd.is_some(), "svgd");
        add(self.gfsvgd.is_some(), "gfsvgd");
        add(self.agf_svgd.is_some(), "agf-svgd");
        add(self.steinis.is_some(), "steinis");
        add(self.path_logz.is_some(), "path-logz");
        add(self.discrete_sample.is_some(), "discrete-sample");
        add(self.gof.is_some(), "gof");
        add(self.bbis.is_some(), "bbis");
        add(self.aggregate.is_some(), "aggregate");
        add(self.oracle.is_some(), "oracle");
        out
    }
}

// ---------------------------------------------------------------------------
// Models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ContinuousSpec {
    /// Isotropic Gaussian; `variance` is shared by all coordinates.
    Gaussian { mean: Vec<f64>, variance: f64 },
    /// Isotropic mixture with a shared component variance.
    Gmm { weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64 },
    /// Equal-weight mixture with means uniform on `[low, high]^dim`.
    RandomGmm {
        components: usize,
        dim: usize,
        #[serde(default = "minus_one")]
        low: f64,
        #[serde(default = "one")]
        high: f64,
        variance: f64,
        seed: u64,
    },
    GaussBernoulliRbm { coupling: Vec<Vec<f64>>, visible_bias: Vec<f64>, hidden_bias: Vec<f64> },
    RandomGaussBernoulliRbm { visible: usize, hidden: usize, seed: u64 },
}

fn minus_one() -> f64 {
    -1.0
}
fn one() -> f64 {
    1.0
}

impl Default for ContinuousSpec {
    fn default() -> Self {
        ContinuousSpec::Gaussian { mean: vec![0.0], variance: 1.0 }
    }
}

pub trait Model: ContinuousTarget + Proposal {}
impl<T: ContinuousTarget + Proposal> Model for T {}

pub enum Built {
    Sampleable(Box<dyn Model>),
    TargetOnly(Box<dyn ContinuousTarget>),
}

impl Built {
    pub fn target(&self) -> &dyn ContinuousTarget {
        match self {
            Built::Sampleable(m) => m.as_ref(),
            Built::TargetOnly(t) => t.as_ref(),
        }
    }

    pub fn proposal(&self) -> Option<&dyn Proposal> {
        match self {
            Built::Sampleable(m) => Some(m.as_ref()),
            Built::TargetOnly(_) => None,
        }
    }
}

fn to_mat(rows: &[Vec<f64>]) -> stein_core::Result<Mat> {
    Mat::from_rows(rows)
}

impl ContinuousSpec {
    fn mixture(&self) -> Option<stein_core::Result<Gmm>> {
        match self {
            ContinuousSpec::Gmm { weights, means, variance } => Some(to_mat(means).and_then(|m| gmm_target(weights, m, *variance))),
            ContinuousSpec::RandomGmm { components, dim, low, high, variance, seed } => {
                use rand::Rng;
                if !(low < high) || *components == 0 {
                    return Some(Err(SteinError::InvalidArgument("random mixture needs components and low < high".into())));
                }
                let mut rng = stream(*seed, 0);
                let means = Mat::from_fn(*components, *dim, |_, _| rng.random_range(*low..*high));
                let w = vec![1.0 / *components as f64; *components];
                Some(gmm_target(&w, means, *variance))
            }
            _ => None,
        }
    }

    pub fn build(&self) -> stein_core::Result<Built> {
        if let Some(g) = self.mixture() {
            return Ok(Built::Sampleable(Box::new(g?)));
        }
        Ok(match self {
            ContinuousSpec::Gaussian { mean, variance } => Built::Sampleable(Box::new(gaussian_target(mean.clone(), *variance)?)),
            ContinuousSpec::GaussBernoulliRbm { coupling, visible_bias, hidden_bias } => Built::TargetOnly(Box::new(
                gauss_bernoulli_rbm_target(to_mat(coupling)?, visible_bias.clone(), hidden_bias.clone())?,
            )),
            ContinuousSpec::RandomGaussBernoulliRbm { visible, hidden, seed } => {
                Built::TargetOnly(Box::new(GaussBernoulliRbm::random(*visible, *hidden, &mut stream(*seed, 0))))
            }
            ContinuousSpec::Gmm { .. } | ContinuousSpec::RandomGmm { .. } => unreachable!("handled above"),
        })
    }

    /// Exact mean when it is available in closed form.
    pub fn mean(&self) -> stein_core::Result<Option<Vec<f64>>> {
        match self {
            ContinuousSpec::Gaussian { mean, .. } => Ok(Some(mean.clone())),
            _ => self.mixture().transpose().map(|g| g.map(|g| g.mean())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiscreteSpec {
    IsingGrid { rows: usize, cols: usize, theta: f64 },
    /// Edges as `[i, j, theta]`.
    Ising { dims: usize, edges: Vec<(usize, usize, f64)> },
    BernoulliRbm { weights: Vec<Vec<f64>>, visible_bias: Vec<f64>, hidden_bias: Vec<f64> },
    RandomBernoulliRbm { visible: usize, hidden: usize, seed: u64 },
    Categorical { values: Vec<f64>, masses: Vec<f64> },
}

impl Default for DiscreteSpec {
    fn default() -> Self {
        DiscreteSpec::IsingGrid { rows: 3, cols: 3, theta: 0.2 }
    }
}

impl DiscreteSpec {
    pub fn build(&self) -> stein_core::Result<DiscreteModel> {
        Ok(match self {
            DiscreteSpec::IsingGrid { rows, cols, theta } => {
                if *rows == 0 || *cols == 0 {
                    return Err(SteinError::InvalidArgument("grid needs at least one row and column".into()));
                }
                DiscreteModel::Ising(Ising::grid(*rows, *cols, *theta))
            }
            DiscreteSpec::Ising { dims, edges } => DiscreteModel::Ising(ising_target(*dims, edges.clone())?),
            DiscreteSpec::BernoulliRbm { weights, visible_bias, hidden_bias } => {
                DiscreteModel::BernoulliRbm(bernoulli_rbm_target(to_mat(weights)?, visible_bias.clone(), hidden_bias.clone())?)
            }
            DiscreteSpec::RandomBernoulliRbm { visible, hidden, seed } => {
                DiscreteModel::BernoulliRbm(BernoulliRbm::random(*visible, *hidden, &mut stream(*seed, 0)))
            }
            DiscreteSpec::Categorical { values, masses } => DiscreteModel::Categorical(categorical_target(values.clone(), masses)?),
        })
    }
}

// ---------------------------------------------------------------------------
// Sections

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSettings {
    pub mode: WeightMode,
    pub min_ess: f64,
    pub scaled_steps: bool,
}

impl Default for WeightSettings {
    fn default() -> Self {
        let d = GfOptions::default();
        WeightSettings { mode: d.weight_mode, min_ess: d.min_ess, scaled_steps: d.weight_scaled_steps }
    }
}

impl WeightSettings {
    pub fn options(&self) -> GfOptions {
        GfOptions { weight_mode: self.mode, min_ess: self.min_ess, weight_scaled_steps: self.scaled_steps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvgdConfig {
    pub target: ContinuousSpec,
    /// Initial particle distribution; must be sampleable.
    pub init: ContinuousSpec,
    pub n: usize,
    pub iters: usize,
    pub kernel: KernelSpec,
    pub schedule: StepSchedule,
    /// Record KSD every this many iterations.
    pub record_every: usize,
}

impl Default for SvgdConfig {
    fn default() -> Self {
        SvgdConfig {
            target: ContinuousSpec::default(),
            init: ContinuousSpec::Gaussian { mean: vec![2.0], variance: 1.0 },
            n: 100,
            iters: 200,
            kernel: KernelSpec::default(),
            schedule: StepSchedule::default(),
            record_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GfSvgdConfig {
    pub target: ContinuousSpec,
    /// `None` uses the target itself.
    pub surrogate: Option<ContinuousSpec>,
    pub init: ContinuousSpec,
    pub n: usize,
    pub iters: usize,
    pub kernel: KernelSpec,
    pub schedule: StepSchedule,
    pub weights: WeightSettings,
    pub record_every: usize,
}

impl Default for GfSvgdConfig {
    fn default() -> Self {
        let s = SvgdConfig::default();
        GfSvgdConfig {
            target: s.target,
            surrogate: None,
            init: s.init,
            n: s.n,
            iters: s.iters,
            kernel: s.kernel,
            schedule: s.schedule,
            weights: WeightSettings::default(),
            record_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgfSvgdConfig {
    pub target: ContinuousSpec,
    /// Start of the annealing path, also the initial distribution.
    pub base: ContinuousSpec,
    /// Explicit temperatures; when absent, `steps` equally spaced ones.
    pub betas: Option<Vec<f64>>,
    pub steps: usize,
    pub n: usize,
    pub kernel: KernelSpec,
    pub schedule: StepSchedule,
    /// Width of the kernel-curve surrogate.
    pub smoothing: KernelSpec,
    pub weights: WeightSettings,
}

impl Default for AgfSvgdConfig {
    fn default() -> Self {
        AgfSvgdConfig {
            target: ContinuousSpec::default(),
            base: ContinuousSpec::Gaussian { mean: vec![0.0], variance: 4.0 },
            betas: None,
            steps: 200,
            n: 100,
            kernel: KernelSpec::default(),
            schedule: StepSchedule::default(),
            smoothing: KernelSpec::default(),
            weights: WeightSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteinIsSection {
    pub target: ContinuousSpec,
    /// Added to the target's log-density (the target becomes `e^c p`).
    pub log_scale: f64,
    /// `None` gives a zero-mean Gaussian with variance 4.
    pub proposal: Option<ContinuousSpec>,
    pub leaders: usize,
    pub followers: usize,
    pub iterations: usize,
    pub kernel: KernelSpec,
    pub schedule: StepSchedule,
    pub det_mode: DetMode,
    pub max_halvings: usize,
    pub trials: usize,
}

impl Default for SteinIsSection {
    fn default() -> Self {
        SteinIsSection {
            target: ContinuousSpec::default(),
            log_scale: 0.0,
            proposal: None,
            leaders: 100,
            followers: 100,
            iterations: 800,
            kernel: KernelSpec::default(),
            schedule: StepSchedule::Decay { alpha: 0.1, beta: 0.5 },
            det_mode: DetMode::Auto,
            max_halvings: 5,
            trials: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub target: ContinuousSpec,
    pub log_scale: f64,
    /// `None` gives a zero-mean Gaussian with variance 2.
    pub proposal: Option<ContinuousSpec>,
    pub n: usize,
    pub iterations: usize,
    pub kernel: KernelSpec,
    pub schedule: StepSchedule,
    pub m0: usize,
    pub trials: usize,
}

impl Default for PathSection {
    fn default() -> Self {
        PathSection {
            target: ContinuousSpec::default(),
            log_scale: 0.0,
            proposal: None,
            n: 200,
            iterations: 100,
            kernel: KernelSpec::default(),
            schedule: StepSchedule::Constant { eps: 0.05 },
            m0: 10_000,
            trials: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscreteSampleConfig {
    pub model: DiscreteSpec,
    pub surrogate: SurrogateMode,
    pub base: BaseDistribution,
    pub n: usize,
    pub iters: usize,
    pub kernel: KernelSpec,
    pub schedule: StepSchedule,
    pub weights: WeightSettings,
}

impl Default for DiscreteSampleConfig {
    fn default() -> Self {
        DiscreteSampleConfig {
            model: DiscreteSpec::default(),
            surrogate: SurrogateMode::Relaxed { tau: stein_core::discrete::DEFAULT_TAU },
            base: BaseDistribution::StandardNormal,
            n: 500,
            iters: 300,
            kernel: KernelSpec::default(),
            schedule: StepSchedule::adam(0.1),
            weights: WeightSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// Exact draws from a model (the tested model when `model` is absent).
    Sample {
        #[serde(default)]
        model: Option<DiscreteSpec>,
        n: usize,
    },
    /// CSV of states, one row per observation, no header.
    File { path: String },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Sample { model: None, n: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GofSection {
    pub model: DiscreteSpec,
    pub data: DataSpec,
    pub test: GofOptions,
    /// Independent data sets; with sampled data this estimates the rejection rate.
    pub repetitions: usize,
}

impl Default for GofSection {
    fn default() -> Self {
        GofSection { model: DiscreteSpec::default(), data: DataSpec::default(), test: GofOptions::default(), repetitions: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BbisSection {
    pub target: ContinuousSpec,
    /// Source of the points; must be sampleable.
    pub proposal: ContinuousSpec,
    /// Score-free weights through this surrogate; `None` uses the target's score.
    pub surrogate: Option<ContinuousSpec>,
    pub n: usize,
    pub trials: usize,
    pub kernel: KernelSpec,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for BbisSection {
    fn default() -> Self {
        BbisSection {
            target: ContinuousSpec::default(),
            proposal: ContinuousSpec::Gaussian { mean: vec![1.0], variance: 1.0 },
            surrogate: None,
            n: 100,
            trials: 100,
            kernel: KernelSpec::default(),
            max_iter: 10_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleConfig {
    /// Exact distribution and site means by enumeration.
    BruteForce { model: DiscreteSpec },
    /// Analytic score against central differences at random points.
    ScoreCheck {
        model: ContinuousSpec,
        #[serde(default = "score_points")]
        points: usize,
        #[serde(default = "one")]
        spread: f64,
    },
    /// Even-partition thresholds and their base masses.
    Partition {
        k: usize,
        #[serde(default)]
        base: BaseDistribution,
    },
}

fn score_points() -> usize {
    20
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig::BruteForce { model: DiscreteSpec::default() }
    }
}
