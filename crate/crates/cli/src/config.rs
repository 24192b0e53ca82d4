//! Flat key=value config files and flag/file/default precedence.
//!
//! Every command accepts `--config <file>`; a command-line flag overrides
//! the file, the file overrides the built-in default.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use dvd_core::{DvdError, Result};

#[derive(Debug, Default)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = HashMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    DvdError::Data(format!(
                        "config line {}: expected key=value, got '{line}'",
                        lineno + 1
                    ))
                })?;
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig { values })
    }

    /// flag > config file > default.
    pub fn resolve<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw.parse::<T>().map_err(|e| {
                DvdError::Data(format!("config key '{key}': cannot parse '{raw}': {e}"))
            }),
            None => Ok(default),
        }
    }

    pub fn resolve_opt<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| {
                    DvdError::Data(format!("config key '{key}': cannot parse '{raw}': {e}"))
                }),
            None => Ok(None),
        }
    }
}

/// Comma-separated usize list ("64,32").
pub fn parse_width_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "epochs=7\n# comment\nlr = 0.5\n").unwrap();
        let cfg = FileConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.resolve::<usize>("epochs", Some(3), 10).unwrap(), 3);
        assert_eq!(cfg.resolve::<usize>("epochs", None, 10).unwrap(), 7);
        assert_eq!(cfg.resolve::<usize>("batch", None, 10).unwrap(), 10);
        assert_eq!(cfg.resolve::<f32>("lr", None, 0.1).unwrap(), 0.5);
    }

    #[test]
    fn malformed_line_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "epochs\n").unwrap();
        assert!(FileConfig::load(Some(&path)).is_err());
    }
}
