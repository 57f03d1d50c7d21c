//! Experiment configuration: JSON in, validated before anything runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlClass, Convention};
use crate::error::{Error, Result};
use crate::spectral::{build_dirichlet_laplacian_1d, gram_matrix, Domain, Interval, ObservationGram, SpectralModel};
use crate::tree::{build_tree, FieldDocument, NoiseProfile, NoiseTree, MAX_DEPTH};

pub const SCHEMA_ID: &str = "experiment-config.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    Simulate,
    Hum,
    NormOpt,
    TimeOpt,
    Verify,
    Sweep,
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Problem::Simulate => "simulate",
            Problem::Hum => "hum",
            Problem::NormOpt => "norm-opt",
            Problem::TimeOpt => "time-opt",
            Problem::Verify => "verify",
            Problem::Sweep => "sweep",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "J")]
    pub dim: usize,
    #[serde(default = "default_domain")]
    pub domain: Domain,
}

fn default_domain() -> Domain {
    Domain::Dirichlet1d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "T_tilde")]
    pub impulse_time: f64,
    #[serde(rename = "K")]
    pub depth: usize,
}

impl TimeConfig {
    pub fn dt(&self) -> f64 {
        self.horizon / self.depth as f64
    }
}

/// Either a constant `F` or one value per step (`F_sched`), the last value
/// extending past the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
    #[serde(rename = "F_sched", default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightConfig {
    Value(f64),
    Keyword(String),
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig::Keyword("auto".into())
    }
}

/// Contract tolerances; defaults are the acceptance thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub duality: f64,
    pub steering: f64,
    /// Relative to `E||y0||^2`.
    pub slack: f64,
    pub chain: f64,
    pub terminal: f64,
    pub decay: f64,
    pub attainment: f64,
    pub cg: f64,
    pub constraint: f64,
    pub uniqueness: f64,
    pub norm: f64,
    pub proportionality: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            duality: 1e-12,
            steering: 1e-8,
            slack: 1e-10,
            chain: 1e-10,
            terminal: 1e-10,
            decay: 1e-12,
            attainment: 1e-10,
            cg: 1e-10,
            constraint: 1e-9,
            uniqueness: 1e-7,
            norm: 1e-7,
            proportionality: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Parameters {
    /// Initial state; defaults to `y0_j = 1/j`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
    pub epsilon: f64,
    /// Sweep values of `epsilon`.
    pub epsilons: Vec<f64>,
    /// Norm bound of the time-optimal problem.
    #[serde(rename = "M")]
    pub bound: f64,
    pub l: WeightConfig,
    pub convention: Convention,
    pub class: ControlClass,
    pub tolerances: Tolerances,
    /// Horizons scanned by the time-optimal problem; multiples of `T/K`.
    #[serde(rename = "T_grid")]
    pub t_grid: Vec<f64>,
    pub max_refine_depth: usize,
    /// Control for `simulate`, at a level not above the impulse level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<FieldDocument>,
    /// Observation time set as inclusive level ranges.
    pub time_set: Vec<[usize; 2]>,
    pub theta: f64,
    pub trials: usize,
}

impl Default for Parameters {
    fn default() -> Self {
        Self {
            y0: None,
            epsilon: 1e-2,
            epsilons: vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
            bound: 1.0,
            l: WeightConfig::default(),
            convention: Convention::Adjoint,
            class: ControlClass::AtImpulse,
            tolerances: Tolerances::default(),
            t_grid: Vec::new(),
            max_refine_depth: 12,
            control: None,
            time_set: Vec::new(),
            theta: 0.5,
            trials: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "$schema", default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub model: ModelConfig,
    #[serde(rename = "G")]
    pub region: Vec<[f64; 2]>,
    pub time: TimeConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<Problem>,
    #[serde(default)]
    pub parameters: Parameters,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_output_dir() -> String {
    "out".into()
}

impl Default for ExperimentConfig {
    /// Small verification setup: `J = 8`, `K = 8`.
    fn default() -> Self {
        Self {
            schema: None,
            model: ModelConfig { dim: 8, domain: Domain::Dirichlet1d },
            region: vec![[0.2, 0.6]],
            time: TimeConfig { horizon: 0.1, impulse_time: 0.05, depth: 8 },
            noise: NoiseConfig { constant: Some(0.5), schedule: None },
            problem: Some(Problem::Verify),
            parameters: Parameters { time_set: vec![[4, 8]], ..Parameters::default() },
            seed: 7,
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn problem(&self) -> Problem {
        self.problem.unwrap_or(Problem::Verify)
    }

    /// Semantic checks beyond the JSON shape.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.schema {
            if !s.contains(SCHEMA_ID) {
                return Err(Error::Config(format!("unsupported schema {s:?}, expected {SCHEMA_ID}")));
            }
        }
        if self.model.dim == 0 {
            return Err(Error::InvalidTruncation(0));
        }
        if self.region.is_empty() {
            return Err(Error::InvalidRegion("G must contain at least one interval".into()));
        }
        let t = &self.time;
        if !(t.horizon > 0.0 && t.horizon.is_finite()) {
            return Err(Error::Config(format!("T = {} must be positive", t.horizon)));
        }
        if t.depth == 0 || t.depth > MAX_DEPTH {
            return Err(Error::Config(format!("K = {} must lie in 1..={MAX_DEPTH}", t.depth)));
        }
        match (&self.noise.constant, &self.noise.schedule) {
            (Some(_), Some(_)) => return Err(Error::Config("noise: give either constant or F_sched, not both".into())),
            (_, Some(v)) if v.is_empty() => return Err(Error::Config("noise: F_sched is empty".into())),
            _ => {}
        }
        let p = &self.parameters;
        if let Some(y0) = &p.y0 {
            if y0.len() != self.model.dim {
                return Err(Error::DimensionMismatch { expected: self.model.dim, found: y0.len() });
            }
        }
        if !(p.epsilon > 0.0) || p.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("epsilon values must be positive".into()));
        }
        if !(p.bound > 0.0) {
            return Err(Error::Config(format!("M = {} must be positive", p.bound)));
        }
        match &p.l {
            WeightConfig::Value(l) if !(*l > 0.0) => return Err(Error::Config(format!("l = {l} must be positive"))),
            WeightConfig::Keyword(k) if k != "auto" => return Err(Error::Config(format!("l must be a number or \"auto\", got {k:?}"))),
            _ => {}
        }
        if !(p.theta > 0.0 && p.theta < 1.0) {
            return Err(Error::Config(format!("theta = {} must lie in (0, 1)", p.theta)));
        }
        if p.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if p.max_refine_depth > MAX_DEPTH {
            return Err(Error::Config(format!("max_refine_depth must be at most {MAX_DEPTH}")));
        }
        // builds the model, region and tree, surfacing misalignment and region errors
        let (model, _) = self.model_and_gram()?;
        let tree = self.tree()?;
        crate::dynamics::Pairing::new(&tree, p.convention, p.class)?;
        if let Some(doc) = &p.control {
            let u = doc.clone().into_field()?;
            if u.dim() != model.dim() {
                return Err(Error::DimensionMismatch { expected: model.dim(), found: u.dim() });
            }
        }
        if self.problem() == Problem::TimeOpt && p.t_grid.is_empty() {
            return Err(Error::Config("time-opt requires a nonempty T_grid".into()));
        }
        Ok(())
    }

    pub fn model_and_gram(&self) -> Result<(SpectralModel, ObservationGram)> {
        let model = match self.model.domain {
            Domain::Dirichlet1d => build_dirichlet_laplacian_1d(self.model.dim)?,
        };
        let ivs: Vec<Interval> = self.region.iter().map(|[a, b]| Interval::new(*a, *b)).collect();
        let gram = gram_matrix(&model, &ivs)?;
        Ok((model, gram))
    }

    pub fn noise_profile(&self) -> NoiseProfile {
        match (&self.noise.constant, &self.noise.schedule) {
            (_, Some(values)) => NoiseProfile::Steps { step: self.time.dt(), values: values.clone() },
            (Some(f), None) => NoiseProfile::Constant(*f),
            (None, None) => NoiseProfile::Constant(0.0),
        }
    }

    pub fn tree(&self) -> Result<NoiseTree> {
        let t = &self.time;
        build_tree(t.depth, t.horizon, t.impulse_time, self.noise_profile().schedule(t.depth, t.dt()))
    }

    pub fn y0(&self) -> Vec<f64> {
        self.parameters.y0.clone().unwrap_or_else(|| (1..=self.model.dim).map(|j| 1.0 / j as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_config() {
        let cfg = ExperimentConfig::from_json(r#"{"model":{"J":3},"G":[[0,0.5]],"time":{"T":1,"T_tilde":0.5,"K":2}}"#).unwrap();
        assert_eq!(cfg.problem(), Problem::Verify);
        assert_eq!(cfg.y0(), vec![1.0, 0.5, 1.0 / 3.0]);
        assert_eq!(cfg.parameters.l, WeightConfig::Keyword("auto".into()));
    }

    #[test]
    fn rejects_bad_configs() {
        let base = r#"{"model":{"J":3},"G":[[0,0.5]],"time":{"T":1,"T_tilde":0.5,"K":2}"#;
        let with = |extra: &str| ExperimentConfig::from_json(&format!("{base}{extra}}}"));
        assert_eq!(with(r#","bogus":1"#).unwrap_err().code(), "E_CONFIG");
        assert_eq!(with(r#","parameters":{"epsilon":-1}"#).unwrap_err().code(), "E_CONFIG");
        assert_eq!(with(r#","parameters":{"l":"big"}"#).unwrap_err().code(), "E_CONFIG");
        assert_eq!(with(r#","noise":{"constant":1,"F_sched":[1]}"#).unwrap_err().code(), "E_CONFIG");
        assert_eq!(with(r#","noise":{"constant":10}"#).unwrap_err().code(), "E_NOISE_TOO_LARGE");
        let misaligned = ExperimentConfig::from_json(r#"{"model":{"J":3},"G":[[0,0.5]],"time":{"T":1,"T_tilde":0.3,"K":2}}"#);
        assert_eq!(misaligned.unwrap_err().code(), "E_GRID_MISALIGNED");
        let restricted = ExperimentConfig::from_json(
            r#"{"model":{"J":3},"G":[[0,0.5]],"time":{"T":1,"T_tilde":0.25,"K":4},"parameters":{"class":"paper-restricted"}}"#,
        );
        assert_eq!(restricted.unwrap_err().code(), "E_RESTRICTED_HORIZON");
        let region = ExperimentConfig::from_json(r#"{"model":{"J":3},"G":[[0.5,0.2]],"time":{"T":1,"T_tilde":0.5,"K":2}}"#);
        assert!(region.is_err());
    }
}
