//! Run configuration: file loading, flag overrides and validation.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};
use srusk::constraints::{ChainOptions, SampleBox, MAX_LEVELS};
use srusk::integrator::{IntegratorOptions, Projection, Scheme};
use srusk::models::ModelParams;
use srusk::GaugeRule;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub initial_state: InitialState,
    pub integrator: IntegratorConfig,
    pub analysis: AnalysisConfig,
    pub outputs: Outputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            initial_state: InitialState::default(),
            integrator: IntegratorConfig::default(),
            analysis: AnalysisConfig::default(),
            outputs: Outputs::default(),
        }
    }
}

/// `name` plus the keys of [`ModelParams`], all in one table.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub params: ModelParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { name: "wave".into(), params: ModelParams::default() }
    }
}

impl<'de> Deserialize<'de> for ModelConfig {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let mut map = Map::deserialize(d)?;
        let name = match map.remove("name") {
            None => ModelConfig::default().name,
            Some(Value::String(s)) => s,
            Some(other) => return Err(D::Error::custom(format!("model.name must be a string, got {other}"))),
        };
        let params = ModelParams::deserialize(Value::Object(map)).map_err(D::Error::custom)?;
        Ok(Self { name, params })
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialState {
    pub t0: f64,
    pub q: Option<Vec<f64>>,
    pub v: Option<Vec<f64>>,
    /// Derived by the Legendre map when absent.
    pub p: Option<Vec<f64>>,
    /// Move `(q, v, p)` onto the final constraint set before integrating.
    pub project_positions: bool,
}

impl Default for InitialState {
    fn default() -> Self {
        Self { t0: 0.0, q: None, v: None, p: None, project_positions: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Newton,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaugeKind {
    Reject,
    Zero,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub step: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    pub projection: ProjectionKind,
    pub projection_tol: f64,
    pub projection_max_iter: usize,
    pub gauge: GaugeKind,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            t_end: 1.0,
            scheme: Scheme::Rk4,
            projection: ProjectionKind::Newton,
            projection_tol: 1e-12,
            projection_max_iter: 20,
            gauge: GaugeKind::Reject,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub max_levels: usize,
    pub rank_tol: f64,
    pub independence_tol: f64,
    pub sample_count: usize,
    pub sample_box: SampleBox,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let c = ChainOptions::default();
        Self {
            max_levels: c.max_levels,
            rank_tol: c.rank_tol,
            independence_tol: c.independence_tol,
            sample_count: 32,
            sample_box: SampleBox::default(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub trajectory: PathBuf,
    pub report: PathBuf,
}

impl Default for Outputs {
    fn default() -> Self {
        Self { trajectory: "trajectory.csv".into(), report: "chain_report.json".into() }
    }
}

impl RunConfig {
    pub fn chain_options(&self) -> ChainOptions {
        ChainOptions {
            max_levels: self.analysis.max_levels,
            rank_tol: self.analysis.rank_tol,
            independence_tol: self.analysis.independence_tol,
            ..ChainOptions::default()
        }
    }

    pub fn integrator_options(&self) -> IntegratorOptions {
        let c = &self.integrator;
        IntegratorOptions {
            step: c.step,
            scheme: c.scheme,
            projection: match c.projection {
                ProjectionKind::Newton => Projection::Newton { tol: c.projection_tol, max_iter: c.projection_max_iter },
                ProjectionKind::Off => Projection::Off,
            },
            t_end: c.t_end,
            gauge: match c.gauge {
                GaugeKind::Reject => GaugeRule::Reject,
                GaugeKind::Zero => GaugeRule::Zero,
            },
        }
    }

    /// Initial positions and velocities, with model-specific defaults for
    /// missing entries.
    pub fn initial_qv(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let (dq, dv) = default_state(&self.model, n);
        let s = &self.initial_state;
        (s.q.clone().unwrap_or(dq), s.v.clone().unwrap_or(dv))
    }

    pub fn validate(&self, n: usize) -> Result<(), ConfigError> {
        let positive = [
            ("integrator.step", self.integrator.step),
            ("integrator.projection_tol", self.integrator.projection_tol),
            ("analysis.rank_tol", self.analysis.rank_tol),
            ("analysis.independence_tol", self.analysis.independence_tol),
        ];
        for (key, x) in positive {
            if !(x > 0.0 && x.is_finite()) {
                return err(format!("{key} must be positive and finite, got {x}"));
            }
        }
        if !self.integrator.t_end.is_finite() || !self.initial_state.t0.is_finite() {
            return err("integrator.t_end and initial_state.t0 must be finite");
        }
        if self.integrator.projection_max_iter == 0 {
            return err("integrator.projection_max_iter must be at least 1");
        }
        if !(1..=MAX_LEVELS).contains(&self.analysis.max_levels) {
            return err(format!("analysis.max_levels must lie in 1..={MAX_LEVELS}"));
        }
        if self.analysis.sample_count == 0 {
            return err("analysis.sample_count must be at least 1");
        }
        let b = &self.analysis.sample_box;
        for (key, (lo, hi)) in [("t", b.t), ("q", b.q), ("v", b.v)] {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return err(format!("analysis.sample_box.{key} must be a finite interval [lo, hi] with lo < hi"));
            }
        }
        let s = &self.initial_state;
        for (key, x) in [("q", &s.q), ("v", &s.v), ("p", &s.p)] {
            if let Some(x) = x {
                if x.len() != n {
                    return err(format!(
                        "initial_state.{key} has {} entries, the model has {n} degrees of freedom",
                        x.len()
                    ));
                }
                if x.iter().any(|c| !c.is_finite()) {
                    return err(format!("initial_state.{key} must be finite"));
                }
            }
        }
        for (key, p) in [("trajectory", &self.outputs.trajectory), ("report", &self.outputs.report)] {
            if p.as_os_str().is_empty() {
                return err(format!("outputs.{key} must not be empty"));
            }
        }
        Ok(())
    }
}

fn default_state(model: &ModelConfig, n: usize) -> (Vec<f64>, Vec<f64>) {
    match model.name.as_str() {
        "wave" => {
            let k = model.params.period;
            let x: Vec<f64> = (0..n).map(|i| i as f64 * k / (n - 1) as f64).collect();
            let q = x.iter().map(|x| 0.3 * (2.0 * PI * x / k).sin() + 0.1 * (4.0 * PI * x / k).cos()).collect();
            let v = x.iter().map(|x| 0.5 * (2.0 * PI * x / k).cos()).collect();
            (q, v)
        }
        "harmonic" => (vec![1.0; n], vec![0.0; n]),
        _ => (vec![0.0; n], vec![1.0; n]),
    }
}

/// Parses a config file into a JSON tree; TOML unless the extension is `.json`.
pub fn read_tree(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let tree = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?,
        Some("toml") => {
            let t: toml::Table = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t).map_err(|e| ConfigError(e.to_string()))?
        }
        _ => return err(format!("{}: config files must end in .toml or .json", path.display())),
    };
    if !tree.is_object() {
        return err(format!("{}: top level must be a table", path.display()));
    }
    Ok(tree)
}

/// Sets `tree[a][b]… = value` for the dotted key `a.b…`, creating tables.
pub fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return err(format!("malformed key `{key}`"));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let map = node.as_object_mut().ok_or_else(|| ConfigError(format!("`{key}`: `{part}` is not a table")))?;
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let map = node.as_object_mut().ok_or_else(|| ConfigError(format!("`{key}`: parent is not a table")))?;
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses the right-hand side of `--set key=value` as a TOML value; bare
/// words become strings.
pub fn parse_assignment(s: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| ConfigError(format!("`{s}`: expected key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("x = {raw}")) {
        Ok(mut t) => {
            serde_json::to_value(t.remove("x").expect("parsed key")).map_err(|e| ConfigError(e.to_string()))?
        }
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

pub fn from_tree(tree: Value) -> Result<RunConfig, ConfigError> {
    serde_json::from_value(tree).map_err(|e| ConfigError(format!("invalid config: {e}")))
}
