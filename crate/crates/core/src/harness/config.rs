//! Flat `key = value` configuration.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use crate::macroode::MacroState;
use crate::model::{validate, PopulationSpec, SplitMode, UtilityFn, UtilitySpec, ValidatedModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
}

const UTILITY_KEYS: [&str; 5] = ["kind", "a", "b", "c", "s"];
const OTHER_KEYS: [&str; 17] = [
    "pop.N",
    "pop.r1",
    "pop.split",
    "pop.seed",
    "init.m1",
    "init.m2",
    "exp.ladder",
    "exp.replicates",
    "exp.horizon",
    "exp.dt",
    "exp.h0",
    "exp.eps1",
    "exp.eps2",
    "exp.checkpoints",
    "exp.alpha",
    "exp.grid",
    "exp.scaling",
];

fn known(key: &str) -> bool {
    if let Some(rest) = key.strip_prefix("phi1.").or_else(|| key.strip_prefix("phi2.")) {
        return UTILITY_KEYS.contains(&rest);
    }
    OTHER_KEYS.contains(&key)
}

/// Parsed configuration. Keys are kept sorted so the canonical form, and so
/// the hash, do not depend on the order of lines in the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    /// Parses `key = value` lines. `#` starts a comment; blank lines are
    /// ignored.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if !known(key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key: key.to_string() });
            }
        }
        Ok(Config { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<(), ConfigError> {
        if !known(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.raw(key)
            .map(|v| v.parse().map_err(|_| ConfigError::BadValue { key: key.to_string(), value: v.to_string() }))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.get(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        item.trim()
                            .parse()
                            .map_err(|_| ConfigError::BadValue { key: key.to_string(), value: v.to_string() })
                    })
                    .collect()
            })
            .transpose()
    }

    /// Sorted `key=value` lines.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn utility(&self, prefix: &str) -> Result<UtilityFn, ConfigError> {
        let key = |name: &str| format!("{prefix}.{name}");
        let kind: String = self.require(&key("kind"))?;
        match kind.as_str() {
            "linear" => Ok(UtilityFn::Linear { slope: self.require(&key("a"))?, intercept: self.require(&key("b"))? }),
            "exponential" => {
                Ok(UtilityFn::Exponential { scale: self.require(&key("c"))?, rate: self.require(&key("s"))? })
            }
            _ => Err(ConfigError::BadValue { key: key("kind"), value: kind }),
        }
    }

    pub fn utility_spec(&self) -> Result<UtilitySpec, ConfigError> {
        Ok(UtilitySpec { family1: self.utility("phi1")?, family2: self.utility("phi2")? })
    }

    pub fn population(&self) -> Result<PopulationSpec, ConfigError> {
        let n = self.require("pop.N")?;
        let r1 = self.get_or("pop.r1", 0.5)?;
        let split = match self.raw("pop.split").unwrap_or("deterministic") {
            "deterministic" => SplitMode::Deterministic,
            "bernoulli" => SplitMode::BernoulliSampled { seed: self.require("pop.seed")? },
            other => return Err(ConfigError::BadValue { key: "pop.split".into(), value: other.into() }),
        };
        Ok(PopulationSpec { n, r1, split })
    }

    pub fn model(&self) -> Result<ValidatedModel, crate::harness::HarnessError> {
        Ok(validate(self.utility_spec()?, self.population()?)?)
    }

    /// Initial fractions, if both are given.
    pub fn initial(&self) -> Result<Option<MacroState>, ConfigError> {
        match (self.get::<f64>("init.m1")?, self.get::<f64>("init.m2")?) {
            (Some(m1), Some(m2)) => Ok(Some(MacroState::new(m1, m2))),
            (None, None) => Ok(None),
            (None, Some(_)) => Err(ConfigError::Missing("init.m1".into())),
            (Some(_), None) => Err(ConfigError::Missing("init.m2".into())),
        }
    }
}
