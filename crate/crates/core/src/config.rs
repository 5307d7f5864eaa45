//! Plain-text `key = value` configuration files.
//!
//! Schema:
//!
//! * one entry per line, `key = value`; surrounding whitespace is ignored;
//! * `#` starts a comment that runs to the end of the line;
//! * keys are dotted paths such as `crop.a_d1` or `estimator.full.horizon`;
//! * vectors are comma-separated numbers, optionally wrapped in `[...]`;
//! * matrices are rows separated by `;`, e.g. `[1, 0; 0, 1]`;
//! * a key may appear only once.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::{fmt_f64, Vector};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("invalid key `{key}`"),
                });
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvConfig {
        let p = format!("{prefix}.");
        KvConfig {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn set_f64(&mut self, key: impl Into<String>, v: f64) {
        self.set(key, fmt_f64(v));
    }

    pub fn set_vector(&mut self, key: impl Into<String>, v: &Vector) {
        let items: Vec<String> = v.iter().map(|x| fmt_f64(*x)).collect();
        self.set(key, format!("[{}]", items.join(", ")));
    }

    pub fn set_matrix(&mut self, key: impl Into<String>, m: &DMatrix<f64>) {
        let rows: Vec<String> = m
            .row_iter()
            .map(|r| r.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(", "))
            .collect();
        self.set(key, format!("[{}]", rows.join("; ")));
    }

    pub fn get_str(&self, key: &str) -> Result<&str, ConfigError> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn get_opt_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, ConfigError> {
        parse_f64(key, self.get_str(key)?)
    }

    pub fn get_f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.entries.get(key) {
            Some(v) => parse_f64(key, v),
            None => Ok(default),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, ConfigError> {
        let s = self.get_str(key)?;
        s.parse().map_err(|_| invalid(key, format!("expected a non-negative integer, got `{s}`")))
    }

    pub fn get_usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        if self.contains(key) {
            self.get_usize(key)
        } else {
            Ok(default)
        }
    }

    pub fn get_u64_opt(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| invalid(key, format!("expected an unsigned integer, got `{s}`"))),
        }
    }

    pub fn get_bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.entries.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true") | Some("yes") | Some("1") => Ok(true),
            Some("false") | Some("no") | Some("0") => Ok(false),
            Some(s) => Err(invalid(key, format!("expected a boolean, got `{s}`"))),
        }
    }

    pub fn get_vector(&self, key: &str) -> Result<Vector, ConfigError> {
        let s = self.get_str(key)?;
        let inner = strip_brackets(s);
        if inner.contains(';') {
            return Err(invalid(key, "expected a vector, found matrix rows".into()));
        }
        let items = split_numbers(key, inner)?;
        Ok(Vector::from_vec(items))
    }

    pub fn get_vector_opt(&self, key: &str) -> Result<Option<Vector>, ConfigError> {
        if self.contains(key) {
            self.get_vector(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn get_matrix(&self, key: &str) -> Result<DMatrix<f64>, ConfigError> {
        let s = self.get_str(key)?;
        let inner = strip_brackets(s);
        let rows: Vec<Vec<f64>> = inner
            .split(';')
            .map(|r| split_numbers(key, r))
            .collect::<Result<_, _>>()?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(invalid(key, "matrix rows have different lengths".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
    }

    /// Renders the configuration in canonical (sorted) order.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for KvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

fn invalid(key: &str, msg: String) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg,
    }
}

fn parse_f64(key: &str, s: &str) -> Result<f64, ConfigError> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| invalid(key, format!("expected a number, got `{s}`")))
}

fn strip_brackets(s: &str) -> &str {
    let t = s.trim();
    t.strip_prefix('[').and_then(|t| t.strip_suffix(']')).unwrap_or(t)
}

fn split_numbers(key: &str, s: &str) -> Result<Vec<f64>, ConfigError> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| parse_f64(key, t))
        .collect()
}
