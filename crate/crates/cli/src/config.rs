//! Flat `key = value` config files merged with command-line flags.
//!
//! Precedence: an explicit flag beats the config file, which beats the
//! built-in default. Keys are the long flag names with `-` or `_`
//! interchangeable. Unknown keys are a usage error.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::UsageError;

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
    echo: RefCell<BTreeMap<String, String>>,
}

fn norm(key: &str) -> String {
    key.trim().replace('-', "_")
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(UsageError(format!("config line {}: expected `key = value`", i + 1)).into());
        };
        out.insert(norm(k), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Settings {
            file,
            ..Default::default()
        })
    }

    fn record(&self, key: &str, value: String) {
        self.used.borrow_mut().insert(key.to_string());
        self.echo.borrow_mut().insert(key.to_string(), value);
    }

    /// Resolved value for `key`: flag, then config file, then `default`.
    pub fn get<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: Value,
        T::Err: Display,
    {
        let value = self.get_opt(key, flag)?.unwrap_or(default);
        self.record(&norm(key), value.echo());
        Ok(value)
    }

    /// Like [`Settings::get`] without a default; absent values are not echoed.
    pub fn get_opt<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: Value,
        T::Err: Display,
    {
        let key = norm(key);
        self.used.borrow_mut().insert(key.clone());
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(&key) {
                Some(raw) => Some(
                    raw.parse()
                        .map_err(|e| UsageError(format!("config key {key} = {raw:?}: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.echo.borrow_mut().insert(key, v.echo());
        }
        Ok(value)
    }

    /// Path-valued setting that must be present.
    pub fn require<T>(&self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: Value,
        T::Err: Display,
    {
        self.get_opt(key, flag)?
            .ok_or_else(|| UsageError(format!("missing required setting --{}", key.replace('_', "-"))).into())
    }

    /// Fails on config-file keys no command setting asked for.
    pub fn finish(&self) -> Result<BTreeMap<String, String>> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.file.keys().filter(|k| !used.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(UsageError(format!("unknown config keys: {unknown:?}")).into());
        }
        Ok(self.echo.borrow().clone())
    }
}

/// A setting type: parsed from text, echoed back as text.
pub trait Value: FromStr {
    fn echo(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {
        $(impl Value for $t {
            fn echo(&self) -> String {
                self.to_string()
            }
        })*
    };
}

display_value!(usize, u64, f64, String);

impl Value for PathBuf {
    fn echo(&self) -> String {
        self.display().to_string()
    }
}

impl<T: FromStr + Display> Value for List<T>
where
    T::Err: Display,
{
    fn echo(&self) -> String {
        self.to_string()
    }
}

/// Comma-separated list, e.g. `16,32,32`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let s = Settings {
            file: parse_kv("# comment\nlearning-rate = 0.5\nepochs=3\n").unwrap(),
            ..Default::default()
        };
        assert_eq!(s.get("learning_rate", None, 0.1).unwrap(), 0.5);
        assert_eq!(s.get("epochs", Some(9usize), 1).unwrap(), 9);
        assert_eq!(s.get("seed", None, 4u64).unwrap(), 4);
        let echo = s.finish().unwrap();
        assert_eq!(echo["epochs"], "9");
        assert_eq!(echo["learning_rate"], "0.5");
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let s = Settings {
            file: parse_kv("bogus = 1").unwrap(),
            ..Default::default()
        };
        assert!(s.finish().is_err());
        assert!(parse_kv("no equals sign").is_err());
        let s = Settings {
            file: parse_kv("epochs = many").unwrap(),
            ..Default::default()
        };
        assert!(s.get("epochs", None, 1usize).is_err());
    }

    #[test]
    fn lists_round_trip() {
        let l: List<usize> = "16, 32,32".parse().unwrap();
        assert_eq!(l.0, vec![16, 32, 32]);
        assert_eq!(l.to_string(), "16,32,32");
        assert!("1,x".parse::<List<usize>>().is_err());
    }
}
