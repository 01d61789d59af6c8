//! Flat `key = value` configuration files with `[section]` headers.
//!
//! The format is deliberately small: full-line `#` comments, blank lines,
//! section headers in brackets, and one `key = value` binding per line.
//! Values are uninterpreted strings; typed accessors parse on demand and
//! name the offending `section.key` on failure. [`Config::echo`] writes the
//! parsed content back out in sorted order, which run manifests use to
//! record every effective setting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed configuration: section name -> key -> raw value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header {line:?}", lineno + 1))
                })?;
                section = name.trim().to_string();
                if section.is_empty() {
                    return Err(Error::Config(format!("line {}: empty section name", lineno + 1)));
                }
                cfg.sections.entry(section.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            let value = value.trim().to_string();
            let slot = cfg.sections.entry(section.clone()).or_default();
            if slot.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}` in section [{section}]",
                    lineno + 1
                )));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key)
            .ok_or_else(|| Error::Config(format!("missing required key `{section}.{key}`")))
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    /// Rejects keys in `section` outside `allowed`, so typos fail loudly
    /// instead of silently falling back to defaults.
    pub fn expect_keys(&self, section: &str, allowed: &[&str]) -> Result<()> {
        let Some(keys) = self.sections.get(section) else {
            return Ok(());
        };
        let unknown: Vec<&str> = keys
            .keys()
            .map(String::as_str)
            .filter(|k| !allowed.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown keys in section [{section}]: {} (allowed: {})",
                unknown.join(", "),
                allowed.join(", ")
            )))
        }
    }

    /// Restricts the file to `allowed` section names.
    pub fn expect_sections(&self, allowed: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self
            .sections
            .keys()
            .map(String::as_str)
            .filter(|s| !s.is_empty() && !allowed.contains(s))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown sections: [{}] (allowed: {})",
                unknown.join("], ["),
                allowed.join(", ")
            )))
        }
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str, what: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("`{section}.{key}`: expected {what}, got {raw:?}"))
            }),
        }
    }

    pub fn u64(&self, section: &str, key: &str) -> Result<Option<u64>> {
        self.parsed(section, key, "an unsigned integer")
    }

    pub fn usize(&self, section: &str, key: &str) -> Result<Option<usize>> {
        self.parsed(section, key, "an unsigned integer")
    }

    pub fn f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        self.parsed(section, key, "a number")
    }

    pub fn bool(&self, section: &str, key: &str) -> Result<Option<bool>> {
        self.parsed(section, key, "true or false")
    }

    pub fn u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        Ok(self.u64(section, key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        Ok(self.usize(section, key)?.unwrap_or(default))
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64(section, key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        Ok(self.bool(section, key)?.unwrap_or(default))
    }

    pub fn str_or<'a>(&'a self, section: &str, key: &str, default: &'a str) -> &'a str {
        self.get(section, key).unwrap_or(default)
    }

    /// Serializes in sorted section/key order. Parsing the result yields an
    /// equal `Config`, and the output is byte-stable for a given content.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        if let Some(global) = self.sections.get("") {
            for (k, v) in global {
                writeln!(out, "{k} = {v}").expect("string write");
            }
        }
        for (name, keys) in &self.sections {
            if name.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push('\n');
            }
            writeln!(out, "[{name}]").expect("string write");
            for (k, v) in keys {
                writeln!(out, "{k} = {v}").expect("string write");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_whitespace() {
        let cfg = Config::parse(
            "# experiment\nroot = 7\n\n[model]\n  d_model = 64\nheads=4\n\n[training]\nbase_lr = 2e-3\n",
        )
        .unwrap();
        assert_eq!(cfg.get("", "root"), Some("7"));
        assert_eq!(cfg.usize("model", "d_model").unwrap(), Some(64));
        assert_eq!(cfg.u64("model", "heads").unwrap(), Some(4));
        assert_eq!(cfg.f64("training", "base_lr").unwrap(), Some(2e-3));
        assert_eq!(cfg.get("training", "missing"), None);
    }

    #[test]
    fn value_may_contain_equals_sign() {
        let cfg = Config::parse("[run]\nnote = a=b=c\n").unwrap();
        assert_eq!(cfg.get("run", "note"), Some("a=b=c"));
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = Config::parse("[m]\na = 1\na = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate key `a`"), "{err}");
    }

    #[test]
    fn malformed_lines_are_rejected_with_line_numbers() {
        let err = Config::parse("[m]\njust words\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = Config::parse("[m\n").unwrap_err();
        assert!(err.to_string().contains("unterminated"), "{err}");
    }

    #[test]
    fn typed_accessors_name_the_key_on_parse_failure() {
        let cfg = Config::parse("[model]\nheads = four\n").unwrap();
        let err = cfg.u64("model", "heads").unwrap_err();
        assert!(err.to_string().contains("`model.heads`"), "{err}");
    }

    #[test]
    fn missing_required_key_is_a_config_error() {
        let cfg = Config::parse("[model]\n").unwrap();
        let err = cfg.require("model", "d_model").unwrap_err();
        assert!(err.to_string().contains("`model.d_model`"), "{err}");
    }

    #[test]
    fn unknown_keys_and_sections_are_flagged() {
        let cfg = Config::parse("[model]\nd_model = 8\ndmodel = 8\n[extra]\nx = 1\n").unwrap();
        let err = cfg.expect_keys("model", &["d_model", "heads"]).unwrap_err();
        assert!(err.to_string().contains("dmodel"), "{err}");
        let err = cfg.expect_sections(&["model"]).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
        cfg.expect_keys("absent", &[]).unwrap();
    }

    #[test]
    fn echo_round_trips_and_is_sorted() {
        let mut cfg = Config::new();
        cfg.set("training", "base_lr", 0.002);
        cfg.set("model", "d_model", 64);
        cfg.set("model", "heads", 4);
        cfg.set("", "root_seed", 7);
        let text = cfg.echo();
        assert_eq!(Config::parse(&text).unwrap(), cfg);
        let model_pos = text.find("[model]").unwrap();
        let training_pos = text.find("[training]").unwrap();
        assert!(model_pos < training_pos);
        assert!(text.starts_with("root_seed = 7\n"));
        assert_eq!(Config::parse(&cfg.echo()).unwrap().echo(), text);
    }

    #[test]
    fn defaults_flow_through_the_or_accessors() {
        let cfg = Config::parse("[training]\nbase_lr = 1e-4\n").unwrap();
        assert_eq!(cfg.f64_or("training", "base_lr", 2e-3).unwrap(), 1e-4);
        assert_eq!(cfg.u64_or("training", "max_steps", 2000).unwrap(), 2000);
        assert_eq!(cfg.str_or("training", "objective", "standard"), "standard");
        assert!(!cfg.bool_or("training", "lm_mode", false).unwrap());
    }
}
