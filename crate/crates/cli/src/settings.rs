//! Merges `--config` files with command-line flags into one key/value map.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thm_core::kv;

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(thm_core::Error),
    /// A check ran to completion and did not pass.
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(thm_core::Error::Divergence { .. }) => 3,
            Failure::Core(thm_core::Error::Param(_)) => 1,
            Failure::Core(_) | Failure::Check(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Check(m) => write!(f, "{m}"),
        }
    }
}

impl From<thm_core::Error> for Failure {
    fn from(e: thm_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Settings for one command: config-file entries overlaid by flags.
/// Every entry must be consumed before [`Settings::finish`].
pub struct Settings {
    map: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(config: Option<&Path>, flags: Vec<(&'static str, Option<String>)>) -> Outcome<Self> {
        let mut map = match config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
                kv::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        }
        Ok(Self { map })
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Outcome<Option<T>> {
        kv::take(&mut self.map, key).map_err(|e| Failure::Usage(e.to_string()))
    }

    pub fn or<T: FromStr>(&mut self, key: &str, default: T) -> Outcome<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Outcome<T> {
        self.get(key)?
            .ok_or_else(|| Failure::Usage(format!("--{} is required", key.replace('_', "-"))))
    }

    pub fn path(&mut self, key: &str) -> Outcome<PathBuf> {
        self.require(key)
    }

    /// Moves the listed keys into a separate map.
    pub fn split_off(&mut self, keys: &[&str]) -> BTreeMap<String, String> {
        keys.iter()
            .filter_map(|k| self.map.remove(*k).map(|v| (k.to_string(), v)))
            .collect()
    }

    pub fn finish(self) -> Outcome {
        kv::reject_unknown(&self.map).map_err(|e| Failure::Usage(e.to_string()))
    }
}
