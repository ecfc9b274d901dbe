use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Flat `key = value` settings. `#` starts a comment; keys are
/// case-sensitive and may use `-` or `_` interchangeably.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1)));
            };
            let key = canonical(k);
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            entries.insert(key, v.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(canonical(key), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(&canonical(key)).map(String::as_str)
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("cannot parse {key} = '{v}'"))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_key(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("cannot parse {key} entry '{s}'"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Later values win.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sorted `key=value` lines, parseable by [`KvConfig::parse`].
    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let c = KvConfig::parse("# run\nepochs = 3\nmass-th=0.7 # inline\n\nseed=1\n").unwrap();
        assert_eq!(c.get("mass_th"), Some("0.7"));
        assert_eq!(c.parse_key::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(KvConfig::parse(&c.render()).unwrap(), c);
        assert!(KvConfig::parse("novalue\n").is_err());
        assert!(c.parse_key::<usize>("mass_th").is_err());
    }

    #[test]
    fn lists() {
        let c = KvConfig::parse("grid = 0.5, 0.7,1.0").unwrap();
        assert_eq!(c.parse_list::<f64>("grid").unwrap(), Some(vec![0.5, 0.7, 1.0]));
    }
}
