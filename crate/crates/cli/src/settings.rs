//! `key=value` run settings: defaults, then a config file, then flags.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Environment variable consulted when `--seed` is absent.
pub const SEED_ENV: &str = "AFA_SEED";

/// Accepted key with its default (`None` when the value is computed or optional).
pub type KeySpec = (&'static str, Option<&'static str>);

#[derive(Debug, Clone)]
pub struct Settings {
    keys: &'static [KeySpec],
    values: BTreeMap<&'static str, String>,
}

impl Settings {
    pub fn new(keys: &'static [KeySpec]) -> Self {
        let values = keys.iter().filter_map(|&(k, d)| d.map(|d| (k, d.to_string()))).collect();
        Settings { keys, values }
    }

    fn key(&self, key: &str) -> Result<&'static str, CliError> {
        self.keys
            .iter()
            .map(|(k, _)| *k)
            .find(|k| *k == key)
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))
    }

    /// Applies `key=value` lines. Blank lines and lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
            let key = self.key(k.trim()).map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", n + 1)))?;
            self.values.insert(key, v.trim().to_string());
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Overrides `key` when the flag was given.
    pub fn flag(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            let key = self.key(key).expect("flag keys are declared");
            self.values.insert(key, v.to_string());
        }
    }

    pub fn flag_bool(&mut self, key: &str, set: bool) {
        if set {
            self.flag(key, Some("true"));
        }
    }

    /// `--seed`, else `AFA_SEED`, else the config file, else the default.
    pub fn seed(&mut self, flag: Option<u64>) {
        if flag.is_some() {
            self.flag("seed", flag);
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            self.flag("seed", Some(v));
        }
    }

    /// Records a computed value so that the echo shows it.
    pub fn fill(&mut self, key: &str, value: impl ToString) {
        if !self.values.contains_key(key) {
            self.flag(key, Some(value));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::Usage(format!("missing required setting {key:?} (--{})", key.replace('_', "-"))))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| CliError::Usage(format!("{key}: cannot parse {v:?}")))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        Ok(self.parse_opt(key)?.unwrap_or(false))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("{key}: cannot parse {s:?}"))))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }
}

/// Declared keys in order, one `key=value` line each; unset keys are omitted.
impl fmt::Display for Settings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, _) in self.keys {
            if let Some(v) = self.values.get(k) {
                writeln!(f, "{k}={v}")?;
            }
        }
        Ok(())
    }
}
