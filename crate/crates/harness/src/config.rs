//! TOML run configuration with `[model]`, `[design]` and `[experiment]`
//! sections.

use std::fmt;
use std::path::Path;

use ddc_core::dgp::{marginal_log_spec, DesignSpec, Misspecification};
use ddc_core::estimate::{FirstStep, WeightSpec};
use ddc_core::model::ModelSpec;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const DEFAULT_REPLICATIONS: usize = 2_000;
pub const FULL_SCALE_REPLICATIONS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub design: DesignConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "default_states")]
    pub n_states: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_states() -> usize {
    20
}

fn default_beta() -> f64 {
    0.9999
}

impl ModelConfig {
    pub fn build(&self) -> ddc_core::Result<ModelSpec> {
        match self.kind {
            ModelKind::Bus => ModelSpec::bus(self.n_states, self.beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub name: String,
    #[serde(default = "default_theta_u")]
    pub theta_u: Vec<f64>,
    #[serde(default = "default_theta_f")]
    pub theta_f: Vec<f64>,
    /// Defaults to `m(x) ∝ 1 + ln x`.
    #[serde(default)]
    pub marginal: Option<Vec<f64>>,
    /// Used by the single-shot commands; experiments take `experiment.deltas`.
    #[serde(default)]
    pub delta: Option<Rate>,
    pub misspec: Misspecification,
    #[serde(default)]
    pub first_step: FirstStepConfig,
}

fn default_theta_u() -> Vec<f64> {
    vec![1.0, 0.05]
}

fn default_theta_f() -> Vec<f64> {
    vec![0.25]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FirstStepConfig {
    #[default]
    BusStayShare,
    Known {
        theta_f: Vec<f64>,
    },
}

impl FirstStepConfig {
    pub fn build(&self) -> FirstStep {
        match self {
            FirstStepConfig::BusStayShare => FirstStep::BusStayShare,
            FirstStepConfig::Known { theta_f } => FirstStep::Known(theta_f.clone()),
        }
    }
}

impl DesignConfig {
    pub fn is_correct(&self) -> bool {
        matches!(self.misspec, Misspecification::Correct)
    }

    /// The design at rate `delta`; correctly specified designs ignore it.
    pub fn build(&self, model: &ModelSpec, delta: Option<f64>) -> ddc_core::Result<DesignSpec> {
        let marginal = match &self.marginal {
            Some(m) => m.clone(),
            None => marginal_log_spec(model.n_states()).iter().copied().collect(),
        };
        let spec = DesignSpec {
            theta_u: self.theta_u.clone(),
            theta_f: self.theta_f.clone(),
            delta: delta.unwrap_or(1.0),
            marginal,
            misspec: self.misspec.clone(),
        };
        spec.validate(model)?;
        Ok(spec)
    }

    pub fn single_delta(&self) -> Option<f64> {
        if self.is_correct() {
            None
        } else {
            Some(self.delta.map_or(0.5, Rate::value))
        }
    }
}

/// A rate exponent, written either as a number or as a fraction string
/// such as `"1/3"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RateRepr", into = "RateRepr")]
pub struct Rate {
    num: f64,
    den: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RateRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<RateRepr> for Rate {
    type Error = String;

    fn try_from(r: RateRepr) -> std::result::Result<Self, String> {
        let rate = match r {
            RateRepr::Number(v) => Rate { num: v, den: 1.0 },
            RateRepr::Text(s) => s.parse()?,
        };
        if rate.value() > 0.0 && rate.value().is_finite() {
            Ok(rate)
        } else {
            Err(format!("rate {rate} must be positive"))
        }
    }
}

impl From<Rate> for RateRepr {
    fn from(r: Rate) -> Self {
        if r.den == 1.0 {
            RateRepr::Number(r.num)
        } else {
            RateRepr::Text(r.to_string())
        }
    }
}

impl std::str::FromStr for Rate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("cannot read rate {s:?}");
        match s.split_once('/') {
            Some((a, b)) => Ok(Rate {
                num: a.trim().parse().map_err(|_| bad())?,
                den: b.trim().parse().map_err(|_| bad())?,
            }),
            None => Ok(Rate {
                num: s.trim().parse().map_err(|_| bad())?,
                den: 1.0,
            }),
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1.0 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl Rate {
    pub fn new(num: f64, den: f64) -> Self {
        Rate { num, den }
    }

    pub fn value(self) -> f64 {
        self.num / self.den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    Ml,
    MdIdentity,
    MdWAv,
    /// Infeasible: uses the true bias direction.
    MdWAmse,
}

impl EstimatorChoice {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ml" => Some(Self::Ml),
            "md_identity" | "md" => Some(Self::MdIdentity),
            "md_w_av" => Some(Self::MdWAv),
            "md_w_amse" => Some(Self::MdWAmse),
            _ => None,
        }
    }

    /// `(estimator, W)` columns of the summary CSV.
    pub fn labels(self) -> (&'static str, &'static str) {
        match self {
            Self::Ml => ("ML", "-"),
            Self::MdIdentity => ("MD", "I"),
            Self::MdWAv => ("MD", "W_AV"),
            Self::MdWAmse => ("MD", "W_AMSE"),
        }
    }

    pub fn needs_limit_inputs(self) -> bool {
        matches!(self, Self::MdWAv | Self::MdWAmse)
    }

    pub fn display(self) -> &'static str {
        match self {
            Self::Ml => "K-ML",
            Self::MdIdentity => "K-MD(I)",
            Self::MdWAv => "K-MD(W_AV)",
            Self::MdWAmse => "K-MD(W_AMSE)",
        }
    }
}

/// How estimates are scaled in summaries.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `n^{min(1/2, δ)}`.
    #[default]
    Correct,
    /// Always `√n`.
    Root,
}

impl Scaling {
    pub fn exponent(self, delta: Option<f64>) -> f64 {
        match (self, delta) {
            (Scaling::Correct, Some(d)) => d.min(0.5),
            _ => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_sizes")]
    pub sample_sizes: Vec<u64>,
    /// Ignored for correctly specified designs.
    #[serde(default = "default_deltas")]
    pub deltas: Vec<Rate>,
    #[serde(default = "default_k")]
    pub k_values: Vec<usize>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorChoice>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_full_scale")]
    pub full_scale_replications: usize,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
    #[serde(default)]
    pub scaling: Scaling,
}

fn default_sizes() -> Vec<u64> {
    vec![200, 500, 1000]
}

fn default_deltas() -> Vec<Rate> {
    vec![Rate::new(1.0, 3.0), Rate::new(1.0, 2.0), Rate::new(1.0, 1.0)]
}

fn default_k() -> Vec<usize> {
    vec![1, 2, 3, 10]
}

fn default_estimators() -> Vec<EstimatorChoice> {
    vec![EstimatorChoice::MdIdentity, EstimatorChoice::MdWAv, EstimatorChoice::Ml]
}

fn default_replications() -> usize {
    DEFAULT_REPLICATIONS
}

fn default_full_scale() -> usize {
    FULL_SCALE_REPLICATIONS
}

fn default_seed() -> u64 {
    20_190_601
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sample_sizes: default_sizes(),
            deltas: default_deltas(),
            k_values: default_k(),
            estimators: default_estimators(),
            replications: default_replications(),
            full_scale_replications: default_full_scale(),
            base_seed: default_seed(),
            scaling: Scaling::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err("sample_sizes must be nonempty and positive".into());
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err("k_values must be nonempty and positive".into());
        }
        if self.estimators.is_empty() {
            return Err("no estimators".into());
        }
        if self.deltas.is_empty() {
            return Err("no deltas".into());
        }
        if self.replications < 2 || self.full_scale_replications < 2 {
            return Err("need at least 2 replications".into());
        }
        Ok(())
    }

    pub fn weight_needed(&self) -> bool {
        self.estimators.iter().any(|e| e.needs_limit_inputs())
    }
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |message: String| HarnessError::Config {
            path: path.to_path_buf(),
            message,
        };
        let cfg: Config = toml::from_str(text).map_err(|e| err(e.to_string()))?;
        cfg.experiment.validate().map_err(err)?;
        let model = cfg.model.build().map_err(|e| err(e.to_string()))?;
        cfg.design
            .build(&model, cfg.design.single_delta())
            .map_err(|e| err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok((Self::parse(&text, path)?, text))
    }
}

/// Resolves an estimator choice to the estimator, given the optimal weights
/// when they were computed.
pub fn estimator_kind(
    choice: EstimatorChoice,
    w_av: Option<&nalgebra::DMatrix<f64>>,
    w_amse: Option<&nalgebra::DMatrix<f64>>,
) -> ddc_core::Result<ddc_core::estimate::EstimatorKind> {
    use ddc_core::estimate::EstimatorKind;
    let missing = || ddc_core::Error::InvalidParameter("optimal weight matrix not available".into());
    Ok(match choice {
        EstimatorChoice::Ml => EstimatorKind::Ml,
        EstimatorChoice::MdIdentity => EstimatorKind::Md(WeightSpec::Identity),
        EstimatorChoice::MdWAv => EstimatorKind::Md(WeightSpec::fixed(w_av.ok_or_else(missing)?.clone())?),
        EstimatorChoice::MdWAmse => {
            EstimatorKind::Md(WeightSpec::fixed(w_amse.ok_or_else(missing)?.clone())?)
        }
    })
}
