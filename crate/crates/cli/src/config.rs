//! Optional `key=value` config files. Keys use the long flag names without
//! the leading dashes; command-line flags always win over file values.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use milrank::{Error, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<ConfigFile> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)?;
        let mut values = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected key=value, got {line:?}"),
                });
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    /// Parsed value for `key`, or None if the file does not set it.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Usage(format!("config key {key} has unusable value {raw:?}"))
            }),
        }
    }

    /// Flag value if given, else the config-file value, else the default.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, "# comment\nepochs = 50\nseed=9\n").unwrap();
        let cfg = ConfigFile::load(Some(&path)).unwrap();
        assert_eq!(cfg.resolve(Some(7usize), "epochs", 1).unwrap(), 7);
        assert_eq!(cfg.resolve(None::<usize>, "epochs", 1).unwrap(), 50);
        assert_eq!(cfg.resolve(None::<u64>, "seed", 0).unwrap(), 9);
        assert_eq!(cfg.resolve(None::<f64>, "momentum", 0.9).unwrap(), 0.9);
    }

    #[test]
    fn malformed_lines_and_values_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(&path, "epochs\n").unwrap();
        assert!(ConfigFile::load(Some(&path)).is_err());
        std::fs::write(&path, "epochs=abc\n").unwrap();
        let cfg = ConfigFile::load(Some(&path)).unwrap();
        assert!(cfg.get::<usize>("epochs").is_err());
    }
}
