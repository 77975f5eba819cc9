//! Flat `key = value` config files. Command-line flags win over the file,
//! the file wins over built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

const KNOWN: &[&str] = &[
    "seed",
    "sites",
    "days",
    "missing_rate",
    "max_missing",
    "infill",
    "site_order",
    "dataset",
    "checkpoint",
    "variant",
    "variants",
    "horizon",
    "horizons",
    "window",
    "windows",
    "epochs",
    "batch_size",
    "learning_rate",
    "l2",
    "patience",
    "filters",
    "lstm_units",
    "split",
    "threshold_mph",
    "spacing_km",
    "upstream_window",
    "site",
    "day",
    "sfc_rows",
];

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut file = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("config line {}: expected key = value", i + 1)))?;
            let key = k.trim().replace('-', "_");
            if !KNOWN.contains(&key.as_str()) {
                return Err(Failure::Usage(format!("config line {}: unknown key {key}", i + 1)));
            }
            file.insert(key, v.trim().to_string());
        }
        Ok(Self {
            file,
            used: BTreeMap::new(),
        })
    }

    /// Resolve `key` and remember the value for the manifest.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure>
    where
        T: FromStr + Display,
    {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(s) => s
                    .parse()
                    .map_err(|_| Failure::Usage(format!("config value for {key} cannot be parsed: {s:?}")))?,
                None => default,
            },
        };
        self.used.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Like [`Settings::get`] with no default.
    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, Failure>
    where
        T: FromStr + Display,
    {
        let value = match flag {
            Some(v) => v,
            None => {
                let s = self
                    .file
                    .get(key)
                    .ok_or_else(|| Failure::Usage(format!("--{} is required", key.replace('_', "-"))))?;
                s.parse()
                    .map_err(|_| Failure::Usage(format!("config value for {key} cannot be parsed: {s:?}")))?
            }
        };
        self.used.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.used
    }
}

/// Comma-separated list.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Failure::Usage(format!("bad list item {p:?}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_default() {
        let mut s = Settings::parse("epochs = 7\n# comment\nwindow=6\n").unwrap();
        assert_eq!(s.get("epochs", Some(3usize), 50).unwrap(), 3);
        assert_eq!(s.get("window", None, 4usize).unwrap(), 6);
        assert_eq!(s.get("horizon", None, 1usize).unwrap(), 1);
        assert_eq!(s.snapshot().get("window").unwrap(), "6");
    }

    #[test]
    fn unknown_and_malformed_lines_rejected() {
        assert!(Settings::parse("colour = red").is_err());
        assert!(Settings::parse("epochs").is_err());
        let mut s = Settings::parse("epochs = many").unwrap();
        assert!(s.get("epochs", None, 1usize).is_err());
    }

    #[test]
    fn dashed_keys_normalize() {
        let mut s = Settings::parse("batch-size = 8").unwrap();
        assert_eq!(s.get("batch_size", None, 4usize).unwrap(), 8);
    }
}
