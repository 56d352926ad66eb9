//! Flat `key=value` configuration text.
//!
//! One entry per line; blank lines and lines starting with `#` are skipped;
//! keys and values are trimmed. Serialization sorts keys, so equal maps
//! always produce identical text.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap(pub BTreeMap<String, String>);

impl KvMap {
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", n + 1)));
            }
            if m.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(Self(m))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn extend(&mut self, other: &KvMap) {
        self.0.extend(other.0.iter().map(|(k, v)| (k.clone(), v.clone())));
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| parse_list(v).map_err(|_| Error::config(format!("{key}: cannot parse list {v:?}"))))
            .transpose()
    }
}

pub fn parse_list<T: FromStr>(text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::config(format!("cannot parse list item {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let kv = KvMap::parse_text("# model\nb = 2\n\na=1,2 \n").unwrap();
        assert_eq!(kv.to_text(), "a=1,2\nb=2\n");
        assert_eq!(kv.list::<u32>("a").unwrap(), Some(vec![1, 2]));
        assert_eq!(kv.parse::<u32>("missing").unwrap(), None);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(KvMap::parse_text("novalue").is_err());
        assert!(KvMap::parse_text("a=1\na=2").is_err());
        assert!(KvMap::parse_text("a=x").unwrap().parse::<f64>("a").is_err());
    }
}
