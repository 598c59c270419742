//! Flat `key = value` config files merged under command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

/// Dashes and underscores are interchangeable in keys.
fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", n + 1)))?;
            let k = normalize(k);
            if !allowed.contains(&k.as_str()) {
                return Err(ConfigError(format!("line {}: unknown key `{k}`", n + 1)));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(Settings { values })
    }

    pub fn load(path: &Option<PathBuf>, allowed: &[&str]) -> anyhow::Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("reading {}: {e}", p.display())))?;
                Ok(Settings::parse(&text, allowed)?)
            }
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, ConfigError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| ConfigError(format!("cannot parse `{s}` for `{key}`"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str, flag: Option<Vec<T>>, default: Vec<T>) -> Result<Vec<T>, ConfigError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .split(',')
                .map(|x| x.trim().parse().map_err(|_| ConfigError(format!("cannot parse `{x}` in `{key}`"))))
                .collect(),
        }
    }

    /// Boolean switches: a set flag wins, otherwise the file decides.
    pub fn flag(&self, key: &str, flag: bool) -> Result<bool, ConfigError> {
        self.get(key, flag.then_some(true), false)
    }

    pub fn path(&self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, ConfigError> {
        Ok(flag.or_else(|| self.raw(key).map(|s| Path::new(s).to_path_buf())))
    }
}
