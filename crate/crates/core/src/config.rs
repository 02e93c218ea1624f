//! Flat `key = value` configuration with dotted keys.
//!
//! ```text
//! # comment
//! train.lr = 1e-3
//! prompt.mode = random
//! ```
//!
//! Later assignments win, so `--set` overrides can simply be appended.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub const SEED_ENV: &str = "AMODAL_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{source_name}:{line}: {message}")]
    Syntax { source_name: String, line: usize, message: String },
    #[error("{key} = {value:?}: {message}")]
    Value { key: String, value: String, message: String },
    #[error("unknown config keys: {}", .0.join(", "))]
    Unknown(Vec<String>),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.split('.').all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
}

impl Config {
    pub fn parse(text: &str, source_name: &str) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: &str| ConfigError::Syntax { source_name: source_name.to_string(), line: i + 1, message: message.to_string() };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let k = k.trim();
            if !valid_key(k) {
                return Err(err(&format!("invalid key {k:?}")));
            }
            c.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let parsed = Self::parse(assignment, "--set")?;
        if parsed.entries.is_empty() {
            return Err(ConfigError::Syntax { source_name: "--set".into(), line: 1, message: "empty override".into() });
        }
        self.entries.extend(parsed.entries);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: v.clone(), message: e.to_string() }),
        }
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .get(key)
            .map(|v| v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: v.clone(), message: e.to_string() }))
            .transpose()
    }

    /// A closed interval written `lo,hi`.
    pub fn get_range(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64), ConfigError> {
        let Some(v) = self.entries.get(key) else { return Ok(default) };
        let bad = |m: &str| ConfigError::Value { key: key.into(), value: v.clone(), message: m.into() };
        let (a, b) = v.split_once(',').ok_or_else(|| bad("expected lo,hi"))?;
        let a: f64 = a.trim().parse().map_err(|_| bad("lower bound is not a number"))?;
        let b: f64 = b.trim().parse().map_err(|_| bad("upper bound is not a number"))?;
        Ok((a, b))
    }

    /// Comma-separated list; empty string is an empty list.
    pub fn get_list(&self, key: &str) -> Vec<String> {
        self.entries
            .get(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }

    /// Rejects keys outside `known`. A known entry ending in `.*` admits any
    /// key under that prefix.
    pub fn check_known(&self, known: &[&str]) -> Result<(), ConfigError> {
        let unknown: Vec<String> = self
            .entries
            .keys()
            .filter(|k| {
                !known.iter().any(|p| match p.strip_suffix(".*") {
                    Some(prefix) => k.starts_with(prefix) && k[prefix.len()..].starts_with('.'),
                    None => k == p,
                })
            })
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Unknown(unknown))
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Serializes back to the text format, keys sorted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Seed precedence: explicit flag, then the environment, then `seed` in the
/// config, then 0.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: &Config) -> Result<u64, ConfigError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(v) = env {
        return v.trim().parse().map_err(|_| ConfigError::Value { key: SEED_ENV.into(), value: v.into(), message: "not an integer".into() });
    }
    config.get_or("seed", 0u64)
}
