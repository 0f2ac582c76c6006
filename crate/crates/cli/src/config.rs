//! Flat TOML experiment configs.
//!
//! Nested tables are flattened to dotted keys, so `[train]\nepochs = 5` and
//! `train.epochs = 5` are the same setting. Every key must appear in [`KEYS`];
//! `n` and `g` are required, everything else has a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use synthgap_core::{
    BaseLoss, BoundInputs, BoundKind, ExperimentSpec, GapSpec, LossConfig, OutputMode,
    PredictorKind, TrainConfig, TrainMode,
};
use toml::Value;

/// A config that could not be read, parsed or validated.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; trial i uses seed + i"),
    ("trials", "trials (seeds) per configuration point"),
    ("classes", "number of classes C"),
    ("dim", "feature dimension d"),
    ("separation", "distance between class means"),
    ("cov_scale", "isotropic class variance"),
    ("gap.mean_shift", "synthetic mean shift vector (length d)"),
    ("gap.mean_shift_norm", "rescales gap.mean_shift to this norm (first axis if the shift is zero)"),
    ("gap.variance_scale", "synthetic variance multiplier"),
    ("gap.label_flip_prob", "synthetic label flip probability"),
    ("gap_reduction", "fraction of the gap removed before sampling, in [0, 1]"),
    ("n", "real sample count (required)"),
    ("g", "synthetic sample count (required)"),
    ("K", "partition size (default 2C)"),
    ("hidden", "hidden width, 0 for a linear model"),
    ("kmeans_iters", "Lloyd iteration cap"),
    ("predictor", "trained | constant"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "minibatch size"),
    ("train.learning_rate", "SGD step size"),
    ("train.momentum", "SGD momentum"),
    ("train.mode", "full | lightweight | synthetic_only"),
    ("train.trace_per_epoch", "trace checkpoints per epoch"),
    ("lambda", "weight of the real-data loss"),
    ("lambda_disc", "discrepancy weight"),
    ("lambda_rob", "robustness weight"),
    ("loss.base", "cross_entropy | l2_residual"),
    ("loss.output_mode", "raw | residual"),
    ("delta", "bound confidence parameter"),
    ("mc_samples", "Monte Carlo draws per estimate"),
    ("test_samples", "held-out draws for accuracy"),
    ("bound", "theorem1 | single_upper | single_lower (verify-bound)"),
    ("sweep.axis", "gap.mean_shift_norm | K | g | lambda_disc | lambda_rob | gap_reduction"),
    ("sweep.values", "explicit grid values"),
    ("sweep.start", "grid start (with stop and step)"),
    ("sweep.stop", "grid stop, inclusive"),
    ("sweep.step", "grid step"),
];

pub const SWEEP_AXES: &[&str] = &[
    "gap.mean_shift_norm",
    "K",
    "g",
    "lambda_disc",
    "lambda_rob",
    "gap_reduction",
];

/// A parsed, validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub spec: ExperimentSpec,
    pub seed: u64,
    pub trials: usize,
    pub bound: BoundKind,
    pub sweep: Option<Sweep>,
    /// The flattened key/value pairs the config was built from.
    pub raw: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub axis: String,
    pub values: Vec<f64>,
}

/// Parses TOML text, applies `overrides` (`key`, `value` pairs from the
/// command line; values are TOML literals, bare words are strings) and
/// validates the result.
pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| err(format!("malformed config: {e}")))?;
    let mut flat = BTreeMap::new();
    flatten("", &Value::Table(table), &mut flat);
    for (k, v) in overrides {
        flat.insert(k.clone(), parse_override(v));
    }
    for k in flat.keys() {
        if !KEYS.iter().any(|(name, _)| name == k) {
            return Err(err(format!("unknown field `{k}`")));
        }
    }
    build(flat)
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                // `gap.mean_shift` is the one array-valued key; tables always nest.
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn parse_override(v: &str) -> Value {
    format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()))
}

struct Fields<'a>(&'a BTreeMap<String, Value>);

impl Fields<'_> {
    fn f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => as_f64(v).ok_or_else(|| type_err(key, "a number", v)),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => as_usize(v).ok_or_else(|| type_err(key, "a non-negative integer", v)),
        }
    }

    fn required_usize(&self, key: &str) -> Result<usize, ConfigError> {
        match self.0.get(key) {
            None => Err(err(format!("missing required field `{key}`"))),
            Some(v) => as_usize(v).ok_or_else(|| type_err(key, "a non-negative integer", v)),
        }
    }

    fn str(&self, key: &str, default: &str) -> Result<String, ConfigError> {
        match self.0.get(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(v) => Err(type_err(key, "a string", v)),
        }
    }

    fn f64_array(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| as_f64(v).ok_or_else(|| type_err(key, "an array of numbers", v)))
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(v) => Err(type_err(key, "an array of numbers", v)),
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_usize(v: &Value) -> Option<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Some(*i as usize),
        _ => None,
    }
}

fn type_err(key: &str, expected: &str, found: &Value) -> ConfigError {
    err(format!("field `{key}`: expected {expected}, found {found}"))
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T, ConfigError> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            err(format!("field `{key}`: expected one of {}, found \"{value}\"", names.join(", ")))
        })
}

fn build(flat: BTreeMap<String, Value>) -> Result<ExperimentConfig, ConfigError> {
    let f = Fields(&flat);
    let classes = f.usize("classes", 3)?;
    let dim = f.usize("dim", 2)?;
    if classes < 2 {
        return Err(err("field `classes`: must be at least 2"));
    }
    if dim == 0 {
        return Err(err("field `dim`: must be at least 1"));
    }
    let n = f.required_usize("n")?;
    let g = f.required_usize("g")?;
    let k = f.usize("K", 2 * classes)?;

    let mut mean_shift = f.f64_array("gap.mean_shift")?.unwrap_or_else(|| {
        let mut v = vec![0.0; dim];
        v[0] = 0.5;
        v
    });
    if mean_shift.len() != dim {
        return Err(err(format!(
            "field `gap.mean_shift`: expected {dim} entries, found {}",
            mean_shift.len()
        )));
    }
    if flat.contains_key("gap.mean_shift_norm") {
        let norm = f.f64("gap.mean_shift_norm", 0.0)?;
        mean_shift = with_norm(&mean_shift, norm);
    }
    let gap = GapSpec {
        mean_shift,
        variance_scale: f.f64("gap.variance_scale", 1.2)?,
        label_flip_prob: f.f64("gap.label_flip_prob", 0.0)?,
    };

    let defaults = TrainConfig::default();
    let loss = LossConfig {
        lambda_real: f.f64("lambda", 4.0)?,
        lambda_disc: f.f64("lambda_disc", 0.1)?,
        lambda_rob: f.f64("lambda_rob", 1.0)?,
        base_loss: choice(
            "loss.base",
            &f.str("loss.base", "cross_entropy")?,
            &[("cross_entropy", BaseLoss::CrossEntropy), ("l2_residual", BaseLoss::L2Residual)],
        )?,
        output_mode: choice(
            "loss.output_mode",
            &f.str("loss.output_mode", "raw")?,
            &[("raw", OutputMode::Raw), ("residual", OutputMode::Residual)],
        )?,
    };
    let train = TrainConfig {
        epochs: f.usize("train.epochs", defaults.epochs)?,
        batch_size: f.usize("train.batch_size", defaults.batch_size)?,
        learning_rate: f.f64("train.learning_rate", defaults.learning_rate)?,
        momentum: f.f64("train.momentum", defaults.momentum)?,
        loss,
        mode: choice(
            "train.mode",
            &f.str("train.mode", "full")?,
            &[
                ("full", TrainMode::Full),
                ("lightweight", TrainMode::Lightweight),
                ("synthetic_only", TrainMode::SyntheticOnly),
            ],
        )?,
        trace_per_epoch: f.usize("train.trace_per_epoch", defaults.trace_per_epoch)?,
        seed: 0,
        clusters: k,
    };
    let spec = ExperimentSpec {
        dim,
        classes,
        separation: f.f64("separation", 3.0)?,
        cov_scale: f.f64("cov_scale", 1.0)?,
        gap,
        gap_reduction: f.f64("gap_reduction", 0.0)?,
        n,
        g,
        k,
        kmeans_iters: f.usize("kmeans_iters", 100)?,
        hidden: f.usize("hidden", 0)?,
        train,
        bound: BoundInputs::new(f.f64("delta", 0.1)?, k, f.usize("mc_samples", 2000)?),
        test_samples: f.usize("test_samples", 2000)?,
        predictor: choice(
            "predictor",
            &f.str("predictor", "trained")?,
            &[("trained", PredictorKind::Trained), ("constant", PredictorKind::Constant)],
        )?,
    };
    let bound = choice(
        "bound",
        &f.str("bound", "theorem1")?,
        &[
            ("theorem1", BoundKind::Theorem1),
            ("single_upper", BoundKind::SingleUpper),
            ("single_lower", BoundKind::SingleLower),
        ],
    )?;
    let trials = f.usize("trials", 1)?;
    if trials == 0 {
        return Err(err("field `trials`: must be at least 1"));
    }
    let seed = match flat.get("seed") {
        None => 0,
        Some(Value::Integer(i)) if *i >= 0 => *i as u64,
        Some(v) => return Err(type_err("seed", "a non-negative integer", v)),
    };
    let sweep = parse_sweep(&f)?;

    let cfg = ExperimentConfig {
        spec,
        seed,
        trials,
        bound,
        sweep,
        raw: flat.clone(),
    };
    cfg.spec
        .validate()
        .map_err(|e| err(format!("invalid configuration: {e}")))?;
    if let Some(s) = &cfg.sweep {
        for &v in &s.values {
            cfg.at_point(&s.axis, v)?;
        }
    }
    Ok(cfg)
}

fn parse_sweep(f: &Fields) -> Result<Option<Sweep>, ConfigError> {
    let any = ["sweep.axis", "sweep.values", "sweep.start", "sweep.stop", "sweep.step"]
        .iter()
        .any(|k| f.0.contains_key(*k));
    if !any {
        return Ok(None);
    }
    let axis = match f.0.get("sweep.axis") {
        None => return Err(err("missing required field `sweep.axis`")),
        Some(_) => f.str("sweep.axis", "")?,
    };
    if !SWEEP_AXES.contains(&axis.as_str()) {
        return Err(err(format!(
            "field `sweep.axis`: unknown axis \"{axis}\"; expected one of {}",
            SWEEP_AXES.join(", ")
        )));
    }
    let values = match f.f64_array("sweep.values")? {
        Some(v) if v.is_empty() => return Err(err("field `sweep.values`: the grid is empty")),
        Some(v) => v,
        None => {
            let get = |k: &str| -> Result<f64, ConfigError> {
                match f.0.get(k) {
                    None => Err(err(format!("missing required field `{k}` (or give `sweep.values`)"))),
                    Some(v) => as_f64(v).ok_or_else(|| type_err(k, "a number", v)),
                }
            };
            grid(get("sweep.start")?, get("sweep.stop")?, get("sweep.step")?)?
        }
    };
    Ok(Some(Sweep { axis, values }))
}

/// Inclusive grid `start, start + step, …, ≤ stop`.
pub fn grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>, ConfigError> {
    if start.is_nan() || stop.is_nan() || start >= stop {
        return Err(err(format!("sweep grid is empty: start {start} must be below stop {stop}")));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(err(format!("field `sweep.step`: must be positive, found {step}")));
    }
    if step > stop - start {
        return Err(err(format!(
            "sweep grid is empty: step {step} exceeds the range {}",
            stop - start
        )));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

fn with_norm(shift: &[f64], norm: f64) -> Vec<f64> {
    let len = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
    if len > 0.0 {
        shift.iter().map(|v| v / len * norm).collect()
    } else {
        let mut v = vec![0.0; shift.len()];
        v[0] = norm;
        v
    }
}

impl ExperimentConfig {
    /// [`ExperimentSpec`] with `axis` set to `value`.
    pub fn at_point(&self, axis: &str, value: f64) -> Result<ExperimentSpec, ConfigError> {
        let mut spec = self.spec.clone();
        let count = |v: f64| -> Result<usize, ConfigError> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(err(format!("sweep axis `{axis}` needs positive integers, found {v}")))
            }
        };
        match axis {
            "gap.mean_shift_norm" => spec.gap.mean_shift = with_norm(&spec.gap.mean_shift, value),
            "K" => {
                let k = count(value)?;
                spec.k = k;
                spec.bound.k = k;
                spec.train.clusters = k;
            }
            "g" => spec.g = count(value)?,
            "lambda_disc" => spec.train.loss.lambda_disc = value,
            "lambda_rob" => spec.train.loss.lambda_rob = value,
            "gap_reduction" => spec.gap_reduction = value,
            other => return Err(err(format!("unknown sweep axis \"{other}\""))),
        }
        spec.validate()
            .map_err(|e| err(format!("sweep point {axis} = {value}: {e}")))?;
        Ok(spec)
    }

    /// SHA-256 over the canonical `key = value` lines of the config, with the
    /// master seed left out and `extra` lines (a sweep point) appended.
    pub fn fingerprint(&self, extra: &[(String, String)]) -> String {
        let mut canon = String::new();
        for (k, v) in &self.raw {
            if k != "seed" {
                let _ = writeln!(canon, "{k} = {v}");
            }
        }
        for (k, v) in extra {
            let _ = writeln!(canon, "@{k} = {v}");
        }
        Sha256::digest(canon.as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}
