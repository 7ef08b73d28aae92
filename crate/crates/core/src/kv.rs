//! Flat `key=value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, (String, usize)>,
    source: PathBuf,
}

impl KvMap {
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found {line:?}")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries
                .insert(k.to_string(), (v.trim().to_string(), i + 1))
                .is_some()
            {
                return Err(err(format!("duplicate key {k:?}")));
            }
        }
        Ok(Self {
            entries,
            source: source.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| Error::Parse {
                path: self.source.clone(),
                line: *line,
                msg: format!("{key}: cannot parse {v:?}: {e}"),
            }),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> Self {
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
            .collect();
        Self {
            entries,
            source: self.source.clone(),
        }
    }

    /// Entries whose key starts with none of `prefixes`.
    pub fn without(&self, prefixes: &[&str]) -> Self {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| !prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self {
            entries,
            source: self.source.clone(),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Rejects keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (k, (_, line)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::Parse {
                    path: self.source.clone(),
                    line: *line,
                    msg: format!("unknown key {k:?}"),
                });
            }
        }
        Ok(())
    }
}

/// Renders pairs as `key=value` lines.
pub fn render<K: Display, V: Display>(pairs: impl IntoIterator<Item = (K, V)>) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}
