//! Flat `key = value` configuration files and flag/file/default resolution.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rankcal_core::{Error, Result};

/// Environment variable that supplies a default seed.
pub const SEED_ENV: &str = "RANKCAL_SEED";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, (usize, String)>,
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl ConfigFile {
    /// Blank lines and lines starting with `#` are skipped. Keys accept
    /// either `-` or `_` as word separator.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, found {line:?}"),
            })?;
            let key = normalize_key(key);
            if key.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            if entries
                .insert(key.clone(), (i + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|e| Error::Parse {
                line: *line,
                message: format!("{key}: {e}"),
            }),
        }
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, value)) => parse_list(value).map(Some).map_err(|message| Error::Parse {
                line: *line,
                message: format!("{key}: {message}"),
            }),
        }
    }

    /// Warns about keys that `known` does not list.
    pub fn warn_unused(&self, command: &str, known: &[&str]) {
        for key in self.keys().filter(|k| !known.contains(k)) {
            log::warn!("config key {key:?} is not used by {command}");
        }
    }
}

pub fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

/// The flag if given, else the config file entry.
pub fn pick<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

pub fn pick_list<T: FromStr>(
    flag: Option<Vec<T>>,
    file: &ConfigFile,
    key: &str,
) -> Result<Option<Vec<T>>>
where
    T::Err: std::fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get_list(key),
    }
}

/// Flag, then config file, then `RANKCAL_SEED`, then zero.
pub fn resolve_seed(flag: Option<u64>, file: &ConfigFile) -> Result<u64> {
    if let Some(seed) = pick(flag, file, "seed")? {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            Error::contract(format!("{SEED_ENV}={v:?} is not a non-negative integer"))
        }),
        Err(_) => Ok(0),
    }
}
