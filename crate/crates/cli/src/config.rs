//! Key=value config files, flag/file resolution, and the plain-text
//! provenance record written next to every command's outputs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use mtnet_core::{Error, Result};

/// Settings loaded from an optional `key=value` file. Lines may be blank or
/// `#` comments; unknown keys are reported, not ignored, so typos surface.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>, known_keys: &[&str]) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::invalid(
                    "config file",
                    format!("{}:{}: expected key=value, got {line:?}", path.display(), lineno + 1),
                ));
            };
            let key = key.trim();
            if !known_keys.contains(&key) {
                return Err(Error::invalid(
                    "config file",
                    format!(
                        "{}:{}: unknown key {key:?}; known keys: {}",
                        path.display(),
                        lineno + 1,
                        known_keys.join(", ")
                    ),
                ));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    /// Parsed value for `key`, if the file provides one.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::invalid("config file", format!("key {key:?} holds {raw:?}: {e}"))
            }),
        }
    }

    /// Command-line value if given, else file value, else the default.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}

/// Deterministic provenance record: command, crate version, and every
/// resolved setting, as a small JSON document with sorted keys and no
/// timestamps (so identical runs write identical records).
pub struct RunRecord {
    command: &'static str,
    settings: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &'static str) -> RunRecord {
        RunRecord { command, settings: BTreeMap::new() }
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.settings.insert(key.to_string(), value.to_string());
    }

    pub fn to_json(&self) -> String {
        let escape = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        let mut out = String::from("{\n");
        out.push_str(&format!("  \"command\": \"{}\",\n", escape(self.command)));
        out.push_str(&format!("  \"version\": \"{}\",\n", env!("CARGO_PKG_VERSION")));
        out.push_str("  \"config\": {\n");
        let n = self.settings.len();
        for (i, (k, v)) in self.settings.iter().enumerate() {
            let comma = if i + 1 < n { "," } else { "" };
            out.push_str(&format!("    \"{}\": \"{}\"{comma}\n", escape(k), escape(v)));
        }
        out.push_str("  }\n}\n");
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn file_values_fill_in_behind_flags() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nepochs = 40\nseed=9\n").unwrap();
        let cfg = FileConfig::load(Some(&path), &["epochs", "seed", "batch_size"]).unwrap();
        // flag wins
        assert_eq!(cfg.resolve(Some(7usize), "epochs", 1).unwrap(), 7);
        // file fills in
        assert_eq!(cfg.resolve(None::<usize>, "epochs", 1).unwrap(), 40);
        // default as last resort
        assert_eq!(cfg.resolve(None::<usize>, "batch_size", 16).unwrap(), 16);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "epochz=40\n").unwrap();
        let err = FileConfig::load(Some(&path), &["epochs"]).unwrap_err();
        assert!(err.to_string().contains("epochz"), "message should name the bad key: {err}");

        std::fs::write(&path, "epochs=forty\n").unwrap();
        let cfg = FileConfig::load(Some(&path), &["epochs"]).unwrap();
        assert!(cfg.get::<usize>("epochs").is_err());
    }

    #[test]
    fn run_records_are_deterministic_and_sorted() {
        let mut rec = RunRecord::new("train");
        rec.set("seed", 5);
        rec.set("arch", "mango_tree_net");
        let a = rec.to_json();
        let mut rec2 = RunRecord::new("train");
        rec2.set("arch", "mango_tree_net");
        rec2.set("seed", 5);
        assert_eq!(a, rec2.to_json(), "insertion order must not matter");
        let arch_pos = a.find("\"arch\"").unwrap();
        let seed_pos = a.find("\"seed\"").unwrap();
        assert!(arch_pos < seed_pos, "keys are emitted sorted");
    }
}
