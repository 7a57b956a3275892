//! Plain-text `key=value` configuration.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored.
//! Later entries override earlier ones.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override {spec:?} is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key}={v}: {e}"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn load<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Entries whose key starts with `prefix.`.
    pub fn section(&self, prefix: &str) -> impl Iterator<Item = (&str, &str)> {
        let p = format!("{prefix}.");
        self.entries
            .iter()
            .filter(move |(k, _)| k.starts_with(&p))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Errors on any key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            if !known.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

impl FromIterator<(String, String)> for KeyValues {
    fn from_iter<I: IntoIterator<Item = (String, String)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut kv = KeyValues::parse("# c\ntrain.lr = 0.001\n\nmodel.blocks=2\n").unwrap();
        assert_eq!(kv.get::<f64>("train.lr").unwrap(), Some(0.001));
        kv.apply_override("model.blocks=3").unwrap();
        let mut b = 0usize;
        kv.load("model.blocks", &mut b).unwrap();
        assert_eq!(b, 3);
        assert!(kv.get::<usize>("train.lr").is_err());
        assert!(KeyValues::parse("oops").is_err());
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
        assert_eq!(kv.section("model").count(), 1);
    }
}
