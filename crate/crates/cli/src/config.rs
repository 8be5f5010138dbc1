//! Config files, `--set` overrides and dataset selection.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use comet_core::data::{
    gen_classification_blobs, gen_gaussian_probe, gen_inverse_dynamics, gen_regression, load_cifar10, load_csv_regression,
    DataSplits,
};
use comet_core::{CometError, Matrix, Result, RngStream};

pub const CIFAR_ENV: &str = "COMET_CIFAR10_DIR";

/// Reads a JSON config (or `{}` without a path) and applies `key.path=value` overrides.
pub fn load_tree(path: Option<&Path>, overrides: &[String]) -> Result<Value> {
    let mut tree = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CometError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                CometError::Config(format!("{} is not valid JSON: {e}", p.display()))
            })?
        }
        None => Value::Object(Map::new()),
    };
    if !tree.is_object() {
        return Err(CometError::Config("config root must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    Ok(tree)
}

/// `a.b.c=value`; the value is parsed as JSON when possible, else taken as a string.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CometError::Config(format!("override `{assignment}` is not key.path=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CometError::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CometError::Config(format!("cannot set `{path}`: `{}` is not an object", keys[..i].join(".")))
        })?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("loop returns on the last key")
}

/// Deserializes with the failing key path in the error.
pub fn parse<T: DeserializeOwned>(tree: Value) -> Result<T> {
    serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        CometError::Config(format!("config key `{path}`: {}", e.into_inner()))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// CIFAR-10 binary batches; `dir` defaults to `$COMET_CIFAR10_DIR`.
    Cifar10 {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
    },
    /// Headered CSV with one numeric target column.
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default)]
        inputs: Option<Vec<String>>,
    },
    /// Smooth nonlinear target over standard-normal inputs.
    SyntheticRegression {
        #[serde(default = "default_regression_n")]
        n: usize,
        #[serde(default = "default_regression_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Joint states of a simulated 7-joint arm with the first joint's torque as target.
    InverseDynamics {
        #[serde(default = "default_regression_n")]
        n: usize,
        #[serde(default = "default_trajectories")]
        trajectories: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Gaussian class clusters.
    Blobs {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_blob_dim")]
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_regression_n() -> usize {
    4000
}

fn default_regression_dim() -> usize {
    21
}

fn default_trajectories() -> usize {
    20
}

fn default_classes() -> usize {
    3
}

fn default_per_class() -> usize {
    200
}

fn default_blob_dim() -> usize {
    10
}

fn default_spread() -> f64 {
    0.5
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::SyntheticRegression {
            n: default_regression_n(),
            dim: default_regression_dim(),
            seed: 0,
        }
    }
}

fn cifar_dir(dir: &Option<PathBuf>) -> Result<PathBuf> {
    dir.clone()
        .or_else(|| std::env::var_os(CIFAR_ENV).map(PathBuf::from))
        .ok_or_else(|| CometError::Config(format!("data.dir is not set and {CIFAR_ENV} is empty")))
}

impl DataSpec {
    pub fn load(&self) -> Result<DataSplits> {
        match self {
            DataSpec::Cifar10 { dir, train_limit } => load_cifar10(&cifar_dir(dir)?, *train_limit),
            DataSpec::Csv { path, target, inputs } => load_csv_regression(path, inputs.as_deref(), target),
            DataSpec::SyntheticRegression { n, dim, seed } => {
                gen_regression(&mut RngStream::new(*seed, 0), *n, *dim)
            }
            DataSpec::InverseDynamics { n, trajectories, seed } => {
                gen_inverse_dynamics(&mut RngStream::new(*seed, 0), *n, *trajectories)
            }
            DataSpec::Blobs { classes, per_class, dim, spread, seed } => {
                gen_classification_blobs(&mut RngStream::new(*seed, 0), *classes, *per_class, *dim, *spread)
            }
        }
    }
}

/// Inputs for the utilization census.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProbeSpec {
    /// Standard-normal vectors shifted by `mean`.
    Gaussian {
        #[serde(default = "default_probe_size")]
        size: usize,
        #[serde(default = "default_probe_dim")]
        dim: usize,
        #[serde(default)]
        mean: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Leading CIFAR-10 test images.
    Cifar10 {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "default_probe_size")]
        size: usize,
    },
}

fn default_probe_size() -> usize {
    10_000
}

fn default_probe_dim() -> usize {
    100
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec::Gaussian {
            size: default_probe_size(),
            dim: default_probe_dim(),
            mean: 0.0,
            seed: 0,
        }
    }
}

impl ProbeSpec {
    pub fn load(&self) -> Result<(Matrix, String)> {
        match self {
            ProbeSpec::Gaussian { size, dim, mean, seed } => {
                let m = gen_gaussian_probe(&mut RngStream::new(*seed, 0), *size, *dim)?.map(|v| v + *mean as f32);
                Ok((m, format!("gaussian(size={size},dim={dim},mean={mean},seed={seed})")))
            }
            ProbeSpec::Cifar10 { dir, size } => {
                let data = load_cifar10(&cifar_dir(dir)?, Some(0))?;
                let n = (*size).min(data.eval.len());
                let ids: Vec<usize> = (0..n).collect();
                Ok((data.eval.inputs.select_rows(&ids), data.eval.provenance.clone()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_nested_keys_and_parse_json() {
        let mut t = serde_json::json!({"a": {"b": 1}});
        apply_override(&mut t, "a.b=2.5").unwrap();
        apply_override(&mut t, "a.c.d=[1,2]").unwrap();
        apply_override(&mut t, "variant=comet").unwrap();
        assert_eq!(t, serde_json::json!({"a": {"b": 2.5, "c": {"d": [1, 2]}}, "variant": "comet"}));
        assert!(apply_override(&mut t, "variant.x=1").is_err());
        assert!(apply_override(&mut t, "novalue").is_err());
    }

    #[test]
    fn parse_errors_name_the_key() {
        #[derive(Debug, Deserialize)]
        #[allow(dead_code)]
        struct Inner {
            epochs: usize,
        }
        #[derive(Debug, Deserialize)]
        #[allow(dead_code)]
        struct Outer {
            train: Inner,
        }
        let err = parse::<Outer>(serde_json::json!({"train": {"epochs": "many"}})).unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }
}
