//! Line-oriented `key = value` files. `#` starts a comment.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, Result};

/// Parsed entries with the line each came from. Keys are consumed by the
/// `take*` methods so leftovers can be reported.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
    origin: String,
}

impl KvFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::config(format!("{origin}:{}: expected `key = value`", i + 1)));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(CliError::config(format!("{origin}:{}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(CliError::config(format!("{origin}:{}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(Self {
            entries,
            origin: origin.into(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::config(format!("{}:{line}: {key}: {e}", self.origin))),
        }
    }

    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Remaining `(key, value, line)` triples in key order.
    pub fn drain(&mut self) -> Vec<(String, String, usize)> {
        std::mem::take(&mut self.entries)
            .into_iter()
            .map(|(k, (v, l))| (k, v, l))
            .collect()
    }

    /// Fails on any key not consumed yet.
    pub fn finish(mut self) -> Result<()> {
        match self.drain().into_iter().next() {
            None => Ok(()),
            Some((k, _, line)) => Err(CliError::config(format!("{}:{line}: unknown key {k:?}", self.origin))),
        }
    }
}
