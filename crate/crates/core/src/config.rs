//! Key-value configuration files.
//!
//! ```text
//! # reference model
//! lifetime = exp:1.0          # exp:<rate> | gamma:<shape>,<rate> | unif:<lo>,<hi> | det:<value>
//! offspring = 0.5,0,0.5       # p_0,p_1,...,p_K
//! motion = bm:1.0             # bm:<diffusion> | poly:<c0>,<c1>,...  (σ(u) = c0 + c1 u + ...)
//! initial_age = 0
//! initial_position = 0
//! seed = 7
//! ```
//!
//! Keys other than the model keys are kept verbatim in [`ConfigFile::extra`]
//! for the command line front end.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{LifetimeLaw, ModelError, ModelSpec, MotionLaw, OffspringLaw, SigmaFn};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("missing key `{0}`")]
    Missing(&'static str),
    #[error("bad value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Value { key: key.to_string(), reason: reason.into() }
}

fn numbers(key: &str, s: &str) -> Result<Vec<f64>, ConfigError> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| bad(key, format!("`{x}`: {e}"))))
        .collect()
}

fn exactly<const N: usize>(key: &str, s: &str) -> Result<[f64; N], ConfigError> {
    let v = numbers(key, s)?;
    v.try_into().map_err(|v: Vec<f64>| bad(key, format!("expected {N} numbers, got {}", v.len())))
}

pub fn parse_lifetime(s: &str) -> Result<LifetimeLaw, ConfigError> {
    const KEY: &str = "lifetime";
    let (kind, args) = s.split_once(':').ok_or_else(|| bad(KEY, "expected kind:params"))?;
    let law = match kind.trim() {
        "exp" => {
            let [rate] = exactly(KEY, args)?;
            LifetimeLaw::Exponential { rate }
        }
        "gamma" => {
            let [shape, rate] = exactly(KEY, args)?;
            LifetimeLaw::Gamma { shape, rate }
        }
        "unif" => {
            let [lo, hi] = exactly(KEY, args)?;
            LifetimeLaw::Uniform { lo, hi }
        }
        "det" => {
            let [value] = exactly(KEY, args)?;
            LifetimeLaw::Deterministic { value }
        }
        other => return Err(bad(KEY, format!("unknown lifetime kind `{other}`"))),
    };
    law.check()?;
    Ok(law)
}

pub fn parse_offspring(s: &str) -> Result<OffspringLaw, ConfigError> {
    Ok(OffspringLaw::new(numbers("offspring", s)?)?)
}

pub fn parse_motion(s: &str) -> Result<MotionLaw, ConfigError> {
    const KEY: &str = "motion";
    let (kind, args) = s.split_once(':').ok_or_else(|| bad(KEY, "expected kind:params"))?;
    let law = match kind.trim() {
        "bm" => {
            let [diffusion] = exactly(KEY, args)?;
            MotionLaw::Brownian { diffusion }
        }
        "poly" => MotionLaw::TimeInhomogeneous(SigmaFn::polynomial(numbers(KEY, args)?)),
        other => return Err(bad(KEY, format!("unknown motion kind `{other}`"))),
    };
    law.check()?;
    Ok(law)
}

/// Parsed configuration file.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl FromStr for ConfigFile {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate(key));
            }
        }
        Ok(ConfigFile { entries })
    }
}

const MODEL_KEYS: [&str; 5] = ["lifetime", "offspring", "motion", "initial_age", "initial_position"];

impl ConfigFile {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key).map(|v| v.parse::<T>().map_err(|e| bad(key, e.to_string()))).transpose()
    }

    /// Non-model keys.
    pub fn extra(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries
            .iter()
            .filter(|(k, _)| !MODEL_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        let lifetime = parse_lifetime(self.get("lifetime").ok_or(ConfigError::Missing("lifetime"))?)?;
        let offspring = parse_offspring(self.get("offspring").ok_or(ConfigError::Missing("offspring"))?)?;
        let motion = parse_motion(self.get("motion").ok_or(ConfigError::Missing("motion"))?)?;
        let initial_age = self.parse_value::<f64>("initial_age")?.unwrap_or(0.0);
        let initial_position = self.parse_value::<f64>("initial_position")?.unwrap_or(0.0);
        Ok(ModelSpec::new(lifetime, offspring, motion).with_initial(initial_age, initial_position))
    }
}
