//! Flat `key=value` text, shared by config files and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; whitespace around keys and values is trimmed. Duplicate keys
/// are rejected.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Error::format(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::format(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

pub fn render<K: Display, V: Display>(pairs: impl IntoIterator<Item = (K, V)>) -> String {
    pairs
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

/// Removes and parses `key`, if present.
pub fn take<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::format(format!("bad value {v:?} for key {key:?}"))),
    }
}

pub fn require<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
    take(map, key)?.ok_or_else(|| Error::format(format!("missing key {key:?}")))
}

/// Fails if any key is left over after the known ones were taken.
pub fn reject_unknown(map: &BTreeMap<String, String>) -> Result<()> {
    match map.keys().next() {
        None => Ok(()),
        Some(k) => Err(Error::format(format!("unknown key {k:?}"))),
    }
}
