//! Flat `key = value` experiment configuration.

use crate::engine::Workers;
use crate::error::{Error, Result};
use crate::functions::registry_function;
use crate::model::{registry_model, ModelSpec};
use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

pub const DEFAULT_SEED: u64 = 20_261_015;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Estimator {
    Pushforward,
    Psi,
    Intermediate,
    Bel,
    Fd,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Pushforward,
        Estimator::Psi,
        Estimator::Intermediate,
        Estimator::Bel,
        Estimator::Fd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Pushforward => "pushforward",
            Estimator::Psi => "psi",
            Estimator::Intermediate => "intermediate",
            Estimator::Bel => "bel",
            Estimator::Fd => "fd",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub model: String,
    pub drift: f64,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub steps: usize,
    pub paths: u64,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    pub function: String,
    pub output: Option<PathBuf>,
    pub workers: Workers,
    pub n_list: Vec<usize>,
    pub bump: f64,
    pub include_rho_tilde: bool,
}

/// Parses `key = value` lines. Blank lines and text after `#` are ignored.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if pairs
            .insert(key.to_string(), value.trim().to_string())
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    Ok(pairs)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn canonical_key(key: &str) -> Option<&'static str> {
    Some(match key {
        "experiment" => "experiment",
        "model" => "model",
        "drift" => "drift",
        "x0" => "x0",
        "T" | "horizon" => "T",
        "n" | "steps" => "n",
        "N" | "paths" => "N",
        "seed" => "seed",
        "estimators" => "estimators",
        "f" => "f",
        "output" | "out" => "output",
        "workers" => "workers",
        "n_list" => "n_list",
        "bump" => "bump",
        "rho_tilde" => "rho_tilde",
        _ => return None,
    })
}

impl ExperimentConfig {
    /// Builds and validates a configuration; later maps override earlier ones.
    pub fn from_layers(layers: &[BTreeMap<String, String>]) -> Result<Self> {
        let mut merged: BTreeMap<&'static str, String> = BTreeMap::new();
        for layer in layers {
            for (k, v) in layer {
                let key =
                    canonical_key(k).ok_or_else(|| Error::Config(format!("unknown key '{k}'")))?;
                merged.insert(key, v.clone());
            }
        }
        let get = |k: &str| merged.get(k).map(String::as_str);

        let model = get("model").unwrap_or("bm1d").to_string();
        let drift = get("drift")
            .map(|v| parse("drift", v))
            .transpose()?
            .unwrap_or(0.0);
        let spec = registry_model(&model, 1.0, drift)?;
        let x0 = match get("x0") {
            Some(v) => parse_list("x0", v)?,
            None => default_start(&spec),
        };
        let estimators = match get("estimators") {
            Some(v) => parse_list::<String>("estimators", v)?
                .iter()
                .map(|s| s.parse())
                .collect::<Result<Vec<Estimator>>>()?,
            None => vec![
                Estimator::Pushforward,
                Estimator::Psi,
                Estimator::Intermediate,
                Estimator::Bel,
            ],
        };
        let workers = match get("workers") {
            Some(v) => {
                Workers::parse(v).ok_or_else(|| Error::Config(format!("invalid workers '{v}'")))?
            }
            None => Workers::Auto,
        };
        let steps = get("n").map(|v| parse("n", v)).transpose()?.unwrap_or(64);
        let n_list = match get("n_list") {
            Some(v) => parse_list("n_list", v)?,
            None => vec![8, 16, 32, 64, 128],
        };
        let config = Self {
            experiment: get("experiment").unwrap_or("halfgrad").to_string(),
            model,
            drift,
            x0,
            horizon: get("T").map(|v| parse("T", v)).transpose()?.unwrap_or(1.0),
            steps,
            paths: get("N")
                .map(|v| parse("N", v))
                .transpose()?
                .unwrap_or(100_000),
            seed: get("seed")
                .map(|v| parse("seed", v))
                .transpose()?
                .unwrap_or(DEFAULT_SEED),
            estimators,
            function: get("f").unwrap_or("linear1").to_string(),
            output: get("output").map(PathBuf::from),
            workers,
            n_list,
            bump: get("bump")
                .map(|v| parse("bump", v))
                .transpose()?
                .unwrap_or(0.01),
            include_rho_tilde: get("rho_tilde")
                .map(|v| parse("rho_tilde", v))
                .transpose()?
                .unwrap_or(true),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_layers(&[parse_pairs(text)?])
    }

    fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        if self.x0.len() != spec.dim() {
            return Err(Error::Config(format!(
                "x0 has {} components but model '{}' has dimension {}",
                self.x0.len(),
                self.model,
                spec.dim()
            )));
        }
        if !(spec.distance(&self.x0) > 0.0) {
            return Err(Error::Config(format!(
                "x0 = {:?} must lie strictly inside the half-space",
                self.x0
            )));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("at least one estimator is required".into()));
        }
        if self.paths < 2 {
            return Err(Error::Config("N must be at least 2".into()));
        }
        if self.steps < 1 || self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(Error::Config("step counts must be at least 1".into()));
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_list must be strictly ascending".into()));
        }
        registry_function(&self.function, spec.level(), spec.dim())?;
        if !self.drift.is_finite() || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("drift and x0 must be finite".into()));
        }
        if !(self.bump > 0.0 && self.bump.is_finite()) {
            return Err(Error::Config("bump must be positive".into()));
        }
        Ok(())
    }

    /// The registry model with this configuration's horizon.
    pub fn spec(&self) -> Result<ModelSpec> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon {} must be positive",
                self.horizon
            )));
        }
        registry_model(&self.model, self.horizon, self.drift)
    }
}

fn default_start(spec: &ModelSpec) -> Vec<f64> {
    let mut x = vec![0.0; spec.dim()];
    x[0] = spec.level() + if spec.dim() == 1 { 1.0 } else { 0.5 };
    x
}
