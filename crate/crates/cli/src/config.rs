//! Experiment configuration: JSON parsing with path-qualified errors, overrides and
//! semantic validation.

use std::fmt;
use std::path::PathBuf;

use brave_core::adversary::AttackStrategy;
use brave_core::encoding::CodecParams;
use brave_core::protocol::FailurePolicy;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

impl ConfigError {
    fn at(path: &str, message: impl fmt::Display) -> Self {
        ConfigError::Invalid {
            path: path.to_owned(),
            message: message.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Logistic(LogisticTask),
    Quadratic(QuadraticTask),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticTask {
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_per_participant")]
    pub per_participant: usize,
    /// Distance between class means in every coordinate, in standard deviations.
    #[serde(default = "d_separation")]
    pub separation: f64,
    #[serde(default = "d_test_size")]
    pub test_size: usize,
    /// Optional CSV files replacing the synthetic blobs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticTask {
    #[serde(default = "d_quad_dim")]
    pub dim: usize,
    #[serde(default = "d_quad_per_participant")]
    pub per_participant: usize,
    #[serde(default = "d_noise")]
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub train: PathBuf,
    pub test: PathBuf,
    pub classes: usize,
}

fn d_dim() -> usize {
    10
}
fn d_per_participant() -> usize {
    200
}
fn d_separation() -> f64 {
    1.5
}
fn d_test_size() -> usize {
    1000
}
fn d_quad_dim() -> usize {
    16
}
fn d_quad_per_participant() -> usize {
    50
}
fn d_noise() -> f64 {
    1.0
}

impl TaskConfig {
    pub fn default_for(kind: &str) -> Option<Self> {
        parse_task(serde_json::json!({ "kind": kind })).ok()
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TaskConfig::Logistic(_) => "logistic",
            TaskConfig::Quadratic(_) => "quadratic",
        }
    }

    fn default_learning_rate(&self) -> f64 {
        match self {
            TaskConfig::Logistic(_) => 0.01,
            TaskConfig::Quadratic(_) => 0.1,
        }
    }
}

/// The config file as written. Integers are signed so that negative values get a
/// validation message rather than a type error.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "d_n")]
    n: i64,
    #[serde(default = "d_f")]
    f: i64,
    #[serde(default = "d_rounds")]
    rounds: i64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "d_attack")]
    attack: String,
    /// Number of Byzantine participants; defaults to `f`.
    #[serde(default)]
    adversaries: Option<i64>,
    #[serde(default)]
    task: Option<Value>,
    #[serde(default)]
    codec: CodecParams,
    #[serde(default = "d_group_bits")]
    group_bits: u64,
    #[serde(default)]
    baseline: bool,
    #[serde(default)]
    failure_policy: FailurePolicy,
    #[serde(default)]
    learning_rate: Option<f64>,
    #[serde(default = "d_batch")]
    batch_size: i64,
    #[serde(default = "d_out")]
    out: PathBuf,
}

fn d_n() -> i64 {
    10
}
fn d_f() -> i64 {
    2
}
fn d_rounds() -> i64 {
    100
}
fn d_attack() -> String {
    "none".into()
}
/// Reads a task object, reporting errors as `task.<field>`.
fn parse_task(mut v: Value) -> Result<TaskConfig, ConfigError> {
    let obj = v
        .as_object_mut()
        .ok_or_else(|| ConfigError::at("task", "expected an object"))?;
    let kind = match obj.remove("kind") {
        Some(Value::String(k)) => k,
        Some(_) => return Err(ConfigError::at("task.kind", "expected a string")),
        None => return Err(ConfigError::at("task.kind", "missing field")),
    };
    fn fields<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, ConfigError> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "task".to_owned() } else { format!("task.{path}") };
            ConfigError::at(&path, e.into_inner())
        })
    }
    match kind.as_str() {
        "logistic" => Ok(TaskConfig::Logistic(fields(v)?)),
        "quadratic" => Ok(TaskConfig::Quadratic(fields(v)?)),
        other => Err(ConfigError::at(
            "task.kind",
            format!("unknown task `{other}`, expected logistic or quadratic"),
        )),
    }
}
fn d_group_bits() -> u64 {
    256
}
fn d_batch() -> i64 {
    10
}
fn d_out() -> PathBuf {
    PathBuf::from("metrics.jsonl")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub f: usize,
    pub rounds: u64,
    pub seed: u64,
    pub attack: AttackStrategy,
    pub adversaries: usize,
    pub task: TaskConfig,
    pub codec: CodecParams,
    pub group_bits: u64,
    pub baseline: bool,
    pub failure_policy: FailurePolicy,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub out: PathBuf,
}

impl ExperimentConfig {
    /// Byzantine participant ids: the last `adversaries` ids.
    pub fn adversary_ids(&self) -> std::ops::Range<usize> {
        if self.attack.is_none() {
            self.n..self.n
        } else {
            self.n - self.adversaries..self.n
        }
    }

    /// Metrics summary path: `<out stem>.summary.json` next to the metrics file.
    pub fn summary_path(&self) -> PathBuf {
        let stem = self
            .out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "metrics".into());
        self.out.with_file_name(format!("{stem}.summary.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Warning(pub String);

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parses and checks a raw JSON config.
///
/// Returns the normalized config plus warnings. The only warning today is the resilience
/// precondition `N > 3f + 2` being violated, which is allowed so the regime can be probed.
pub fn validate_config(raw: Value) -> Result<(ExperimentConfig, Vec<Warning>), ConfigError> {
    let raw: RawConfig = serde_path_to_error::deserialize(raw).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::at(if path == "." { "config" } else { &path }, e.into_inner())
    })?;
    let nonneg = |path: &str, v: i64| -> Result<usize, ConfigError> {
        usize::try_from(v).map_err(|_| ConfigError::at(path, format!("must be non-negative, got {v}")))
    };
    let n = nonneg("n", raw.n)?;
    let f = nonneg("f", raw.f)?;
    if n < 3 {
        return Err(ConfigError::at("n", format!("need at least 3 participants, got {n}")));
    }
    let rounds = nonneg("rounds", raw.rounds)?;
    if rounds == 0 {
        return Err(ConfigError::at("rounds", "must be at least 1"));
    }
    let task = parse_task(raw.task.unwrap_or_else(|| serde_json::json!({ "kind": "logistic" })))?;
    let attack: AttackStrategy = raw.attack.parse().map_err(|e| ConfigError::at("attack", e))?;
    let adversaries = match raw.adversaries {
        Some(a) => nonneg("adversaries", a)?,
        None => f,
    };
    if adversaries > n {
        return Err(ConfigError::at("adversaries", format!("{adversaries} exceeds n = {n}")));
    }
    let batch_size = nonneg("batch_size", raw.batch_size)?;
    if batch_size == 0 {
        return Err(ConfigError::at("batch_size", "must be at least 1"));
    }
    let learning_rate = raw.learning_rate.unwrap_or_else(|| task.default_learning_rate());
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(ConfigError::at("learning_rate", "must be a non-negative number"));
    }
    if raw.group_bits < 16 {
        return Err(ConfigError::at("group_bits", "must be at least 16"));
    }
    if raw.codec.scale == 0 {
        return Err(ConfigError::at("codec.scale", "must be positive"));
    }
    if !(raw.codec.bound.is_finite() && raw.codec.bound > 0.0) {
        return Err(ConfigError::at("codec.bound", "must be positive"));
    }
    match &task {
        TaskConfig::Logistic(LogisticTask {
            dim,
            per_participant,
            separation,
            test_size,
            csv,
        }) => {
            if csv.is_none() {
                if *dim == 0 {
                    return Err(ConfigError::at("task.dim", "must be positive"));
                }
                if *per_participant == 0 {
                    return Err(ConfigError::at("task.per_participant", "must be positive"));
                }
                if *test_size == 0 {
                    return Err(ConfigError::at("task.test_size", "must be positive"));
                }
                if !(separation.is_finite() && *separation > 0.0) {
                    return Err(ConfigError::at("task.separation", "must be positive"));
                }
            }
            if let Some(c) = csv {
                if c.classes < 2 {
                    return Err(ConfigError::at("task.csv.classes", "need at least 2 classes"));
                }
            }
        }
        TaskConfig::Quadratic(QuadraticTask {
            dim,
            per_participant,
            noise,
        }) => {
            if *dim == 0 {
                return Err(ConfigError::at("task.dim", "must be positive"));
            }
            if *per_participant == 0 {
                return Err(ConfigError::at("task.per_participant", "must be positive"));
            }
            if !(noise.is_finite() && *noise >= 0.0) {
                return Err(ConfigError::at("task.noise", "must be non-negative"));
            }
        }
    }
    let mut warnings = Vec::new();
    if n <= 3 * f + 2 {
        warnings.push(Warning(format!(
            "n = {n} <= 3f + 2 = {}: resilience guarantees do not hold",
            3 * f + 2
        )));
    }
    Ok((
        ExperimentConfig {
            n,
            f,
            rounds: rounds as u64,
            seed: raw.seed,
            attack,
            adversaries,
            task,
            codec: raw.codec,
            group_bits: raw.group_bits,
            baseline: raw.baseline,
            failure_policy: raw.failure_policy,
            learning_rate,
            batch_size,
            out: raw.out,
        },
        warnings,
    ))
}

/// Command-line values that replace fields of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub n: Option<i64>,
    pub f: Option<i64>,
    pub rounds: Option<i64>,
    pub seed: Option<u64>,
    pub attack: Option<String>,
    pub task: Option<String>,
    pub baseline: bool,
    pub out: Option<PathBuf>,
    pub failure_policy: Option<String>,
}

/// Writes `overrides` into the raw JSON object before validation.
pub fn apply_overrides(mut raw: Value, o: &Overrides) -> Result<Value, ConfigError> {
    let obj = raw
        .as_object_mut()
        .ok_or_else(|| ConfigError::at("config", "expected a JSON object"))?;
    let mut set = |k: &str, v: Value| {
        obj.insert(k.to_owned(), v);
    };
    if let Some(v) = o.n {
        set("n", v.into());
    }
    if let Some(v) = o.f {
        set("f", v.into());
    }
    if let Some(v) = o.rounds {
        set("rounds", v.into());
    }
    if let Some(v) = o.seed {
        set("seed", v.into());
    }
    if let Some(v) = &o.attack {
        set("attack", v.clone().into());
    }
    if o.baseline {
        set("baseline", true.into());
    }
    if let Some(v) = &o.out {
        set("out", v.to_string_lossy().into_owned().into());
    }
    if let Some(v) = &o.failure_policy {
        set("failure_policy", v.replace('-', "_").into());
    }
    if let Some(kind) = &o.task {
        let same = obj
            .get("task")
            .and_then(|t| t.get("kind"))
            .and_then(Value::as_str)
            == Some(kind.as_str());
        if !same {
            obj.insert("task".into(), serde_json::json!({ "kind": kind }));
        }
    }
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn check(v: Value) -> Result<(ExperimentConfig, Vec<Warning>), ConfigError> {
        validate_config(v)
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let (c, w) = check(json!({})).unwrap();
        assert_eq!((c.n, c.f, c.rounds, c.adversaries), (10, 2, 100, 2));
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.attack, AttackStrategy::None);
        assert!(w.is_empty());
    }

    #[test]
    fn resilience_warning_exactly_when_violated() {
        assert!(check(json!({"n": 10, "f": 2})).unwrap().1.is_empty());
        assert_eq!(check(json!({"n": 10, "f": 3})).unwrap().1.len(), 1);
        assert_eq!(check(json!({"n": 11, "f": 3})).unwrap().1.len(), 1);
        assert!(check(json!({"n": 12, "f": 3})).unwrap().1.is_empty());
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(
            check(json!({"f": -1})).unwrap_err(),
            ConfigError::at("f", "must be non-negative, got -1")
        );
        let e = check(json!({"task": {"kind": "logistic", "dim": "ten"}})).unwrap_err();
        assert!(e.to_string().starts_with("task.dim"), "{e}");
        let e = check(json!({"codec": {"scale": 1, "bound": -1.0}})).unwrap_err();
        assert!(e.to_string().starts_with("codec.bound"), "{e}");
        let e = check(json!({"attack": "teleport"})).unwrap_err();
        assert!(e.to_string().starts_with("attack"), "{e}");
        let e = check(json!({"bogus": 1})).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        assert!(check(json!({"n": 2})).is_err());
        assert!(check(json!({"adversaries": 11})).is_err());
    }

    #[test]
    fn overrides_replace_fields() {
        let base = json!({"n": 6, "task": {"kind": "quadratic", "dim": 3}});
        let o = Overrides {
            n: Some(12),
            attack: Some("gaussian:0.5".into()),
            task: Some("quadratic".into()),
            failure_policy: Some("exclude-retry".into()),
            ..Default::default()
        };
        let (c, _) = check(apply_overrides(base.clone(), &o).unwrap()).unwrap();
        assert_eq!(c.n, 12);
        assert_eq!(c.attack, AttackStrategy::Gaussian { sigma: 0.5 });
        assert_eq!(c.failure_policy, FailurePolicy::ExcludeRetry);
        // same kind keeps the file's task parameters
        assert!(matches!(c.task, TaskConfig::Quadratic(QuadraticTask { dim: 3, .. })));
        let o = Overrides {
            task: Some("logistic".into()),
            ..Default::default()
        };
        let (c, _) = check(apply_overrides(base, &o).unwrap()).unwrap();
        assert_eq!(c.task.kind(), "logistic");
    }

    #[test]
    fn summary_sits_next_to_metrics() {
        let (c, _) = check(json!({"out": "runs/a.jsonl"})).unwrap();
        assert_eq!(c.summary_path(), PathBuf::from("runs/a.summary.json"));
    }
}
