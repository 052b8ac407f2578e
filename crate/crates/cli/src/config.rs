//! Flat `key=value` run configuration with command-line overrides.
//!
//! A configuration file holds one `key = value` pair per line; blank lines
//! and lines starting with `#` are ignored. Overrides given as
//! `--key value` or `--key=value` win over the file. Every command declares
//! its keys; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyDefault {
    Value(&'static str),
    Required,
    Optional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: KeyDefault,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: KeyDefault::Value(default),
        help,
    }
}

pub const fn required(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: KeyDefault::Required,
        help,
    }
}

pub const fn optional(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: KeyDefault::Optional,
        help,
    }
}

/// Parse `key = value` lines.
pub fn parse_text(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = normalize_key(k.trim());
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(CliError::Config(format!("{origin}:{}: duplicate key `{k}`", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

fn normalize_key(k: &str) -> String {
    k.replace('-', "_")
}

/// Parse `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Config(format!("expected `--key value`, got `{arg}`")))?;
        let (k, v) = match name.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Config(format!("missing value for `--{name}`")))?;
                (name.to_string(), v.clone())
            }
        };
        out.push((normalize_key(&k), v));
    }
    Ok(out)
}

/// Resolved configuration of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    schema: &'static [KeySpec],
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Merge defaults, file entries and overrides (in that order of
    /// precedence, lowest first) and check the result against `schema`.
    pub fn resolve(
        schema: &'static [KeySpec],
        file: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for spec in schema {
            if let KeyDefault::Value(v) = spec.default {
                values.insert(spec.name.to_string(), v.to_string());
            }
        }
        for (k, v) in file.iter().chain(overrides) {
            if !schema.iter().any(|s| s.name == k) {
                let known: Vec<&str> = schema.iter().map(|s| s.name).collect();
                return Err(CliError::Config(format!("unknown key `{k}` (known keys: {})", known.join(", "))));
            }
            values.insert(k.clone(), v.clone());
        }
        for spec in schema {
            if spec.default == KeyDefault::Required && !values.contains_key(spec.name) {
                return Err(CliError::Config(format!("missing required key `{}` ({})", spec.name, spec.help)));
            }
        }
        Ok(Self { schema, values })
    }

    pub fn load(schema: &'static [KeySpec], path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                parse_text(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        Self::resolve(schema, &file, &parse_overrides(overrides)?)
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        debug_assert!(self.schema.iter().any(|s| s.name == key), "undeclared key {key}");
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn str(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key)
            .ok_or_else(|| CliError::Config(format!("missing key `{key}`")))
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        self.raw(key).filter(|s| !s.is_empty())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(key)?;
        raw.parse()
            .map_err(|e| CliError::Config(format!("invalid value `{raw}` for `{key}`: {e}")))
    }

    pub fn opt_parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.opt_str(key) {
            Some(_) => self.parse(key).map(Some),
            None => Ok(None),
        }
    }

    /// A strictly positive integer.
    pub fn positive(&self, key: &str) -> Result<usize, CliError> {
        let v: usize = self.parse(key)?;
        if v == 0 {
            return Err(CliError::Config(format!("`{key}` must be positive")));
        }
        Ok(v)
    }

    pub fn positive_f64(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self.parse(key)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::Config(format!("`{key}` must be a positive number, got {v}")));
        }
        Ok(v)
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.str(key)?;
        raw.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Config(format!("invalid entry `{s}` in `{key}`: {e}")))
            })
            .collect()
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.opt_str(key).map(PathBuf::from)
    }

    /// Effective configuration in schema order; loading it back reproduces
    /// this configuration.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for spec in self.schema {
            if let Some(v) = self.values.get(spec.name) {
                let _ = writeln!(out, "{} = {}", spec.name, v);
            }
        }
        out
    }
}

/// Human-readable key listing for `--list-keys`.
pub fn describe(schema: &[KeySpec]) -> String {
    let width = schema.iter().map(|s| s.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for s in schema {
        let d = match s.default {
            KeyDefault::Value(v) => format!("[default: {v}]"),
            KeyDefault::Required => "[required]".to_string(),
            KeyDefault::Optional => "[optional]".to_string(),
        };
        let _ = writeln!(out, "  {:<width$}  {} {}", s.name, s.help, d);
    }
    out
}
