//! Flat `key = value` config files and flag/file/default resolution.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::UsageError;

/// Parsed config file. Keys use the long flag spelling (`epochs`,
/// `objective`, `delta-v`); `_` and `-` are interchangeable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

fn canonical(key: &str) -> String {
    key.trim().replace('_', "-").to_ascii_lowercase()
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(UsageError(format!(
                    "config line {}: expected key = value",
                    n + 1
                )));
            };
            let key = canonical(k);
            if key.is_empty() {
                return Err(UsageError(format!("config line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(UsageError(format!(
                    "config line {}: duplicate key '{key}'",
                    n + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Ok(Self::parse(&text)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(&canonical(key)).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Resolves each setting as flag, else file, else default, and records the
/// result for the run manifest.
#[derive(Debug, Default)]
pub struct Resolver {
    file: ConfigFile,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    /// Reads the config file when one is given.
    pub fn open(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Ok(Self::new(file))
    }

    pub fn new(file: ConfigFile) -> Self {
        Self {
            file,
            resolved: BTreeMap::new(),
        }
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, UsageError>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(text)) => text
                .parse()
                .map_err(|e| UsageError(format!("config key '{key}' = '{text}': {e}")))?,
            (None, None) => default,
        };
        self.resolved.insert(canonical(key), value.to_string());
        Ok(value)
    }

    /// Like [`Resolver::get`] for settings without a default.
    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, UsageError>
    where
        T: FromStr + fmt::Display,
        T::Err: fmt::Display,
    {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => Some(v),
            (None, Some(text)) => Some(
                text.parse()
                    .map_err(|e| UsageError(format!("config key '{key}' = '{text}': {e}")))?,
            ),
            (None, None) => None,
        };
        if let Some(v) = &value {
            self.resolved.insert(canonical(key), v.to_string());
        }
        Ok(value)
    }

    /// Rejects file keys no setting asked for, then hands back the resolved
    /// values.
    pub fn finish(self) -> Result<BTreeMap<String, String>, UsageError> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.resolved.contains_key(*k))
            .collect();
        if !unknown.is_empty() {
            return Err(UsageError(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        Ok(self.resolved)
    }
}

/// Comma-separated list, e.g. `64,64` or `uniform,logarithmic`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Self(Vec::new()));
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|e: T::Err| format!("'{}': {e}", p.trim()))
            })
            .collect::<Result<Vec<T>, String>>()
            .map(Self)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// A positive number written as a decimal or a fraction (`1/512`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    text_num: Option<(f64, f64)>,
}

impl Ratio {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            text_num: None,
        }
    }

    pub fn from_fraction(num: f64, den: f64) -> Self {
        Self {
            value: num / den,
            text_num: Some((num, den)),
        }
    }
}

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let parse = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("'{t}': {e}"));
        let (value, text_num) = match s.split_once('/') {
            Some((n, d)) => {
                let (n, d) = (parse(n)?, parse(d)?);
                (n / d, Some((n, d)))
            }
            None => (parse(s)?, None),
        };
        if !(value.is_finite() && value > 0.0) {
            return Err(format!("'{s}' must be a positive number"));
        }
        Ok(Self { value, text_num })
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.text_num {
            Some((n, d)) => write!(f, "{n}/{d}"),
            None => write!(f, "{}", self.value),
        }
    }
}
