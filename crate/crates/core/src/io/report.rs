//! Flat `key = value` reports.

use std::fmt::Display;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Echoes every resolved configuration value under `config.`.
    pub fn push_config(&mut self, cfg: &RunConfig) {
        for key in crate::config::KEYS {
            self.push(&format!("config.{key}"), cfg.get(key).unwrap_or_default());
        }
        self.push("config.kl_constant_terms", "dropped");
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses text produced by [`Report::to_text`].
    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self { entries }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut r = Report::new();
        r.push("rmse_after", 0.0125);
        r.push("note", "a = b");
        r.push_config(&RunConfig::default());
        let back = Report::parse(&r.to_text());
        assert_eq!(back, r);
        assert_eq!(back.get("rmse_after"), Some("0.0125"));
        assert_eq!(back.get("config.seed"), Some("0"));
    }
}
