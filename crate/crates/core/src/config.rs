//! Line-oriented `key = value` configuration text with `[section]` headers.
//!
//! ```text
//! # comment (also after a value)
//! seed = 7            # keys before any header belong to the unnamed section
//! [train]
//! rounds = 10
//! ```
//!
//! Keys and section names use `[A-Za-z0-9_-]`. Values run to the end of the
//! line (or a `#`) and are trimmed. Repeating a key within a section, or a
//! section header, is an error.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigDoc {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    value: String,
    line: usize,
    used: bool,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = ConfigDoc::default();
        doc.sections.insert(String::new(), BTreeMap::new());
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| valid_name(n))
                    .ok_or_else(|| Error::Config(format!("line {line_no}: malformed section header `{line}`")))?;
                if doc.sections.contains_key(name) {
                    return Err(Error::Config(format!("line {line_no}: section [{name}] appears twice")));
                }
                doc.sections.insert(name.to_string(), BTreeMap::new());
                current = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, found `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !valid_name(key) {
                return Err(Error::Config(format!("line {line_no}: invalid key `{key}`")));
            }
            if value.is_empty() {
                return Err(Error::Config(format!("line {line_no}: key `{key}` has no value")));
            }
            let section = doc.sections.get_mut(&current).expect("current section exists");
            if section.contains_key(key) {
                return Err(Error::Config(format!("line {line_no}: key `{key}` repeated")));
            }
            section.insert(key.to_string(), Entry { value: value.to_string(), line: line_no, used: false });
        }
        Ok(doc)
    }

    /// Raw value of `section.key`, marking it as consumed.
    pub fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.sections.get_mut(section)?.get_mut(key).map(|e| {
            e.used = true;
            e.value.clone()
        })
    }

    /// Parsed value of `section.key`, or `default` when absent.
    pub fn get_or<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T> {
        match self.take(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(section, key, &v)),
        }
    }

    pub fn bad(&self, section: &str, key: &str, value: &str) -> Error {
        let line = self.sections.get(section).and_then(|s| s.get(key)).map_or(0, |e| e.line);
        let name = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        Error::Config(format!("line {line}: invalid value `{value}` for {name}"))
    }

    /// Fails on the first key that was never consumed.
    pub fn reject_unused(&self) -> Result<()> {
        for (section, entries) in &self.sections {
            for (key, e) in entries {
                if !e.used {
                    let name = if section.is_empty() { key.clone() } else { format!("{section}.{key}") };
                    return Err(Error::Config(format!("line {}: unknown key {name}", e.line)));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let mut doc = ConfigDoc::parse("seed = 3 # root\n\n[train]\n# note\nrounds=10\nalpha = 0.25\n").unwrap();
        assert_eq!(doc.get_or("", "seed", 0u64).unwrap(), 3);
        assert_eq!(doc.get_or("train", "rounds", 0usize).unwrap(), 10);
        assert_eq!(doc.get_or("train", "alpha", 0.0f64).unwrap(), 0.25);
        assert_eq!(doc.get_or("train", "missing", 7usize).unwrap(), 7);
        doc.reject_unused().unwrap();
    }

    #[test]
    fn reports_errors_with_line_numbers() {
        for (text, needle) in [
            ("[train\n", "line 1"),
            ("a = 1\na = 2\n", "line 2"),
            ("[x]\n[x]\n", "line 2"),
            ("novalue\n", "line 1"),
            ("k =\n", "line 1"),
        ] {
            let msg = ConfigDoc::parse(text).unwrap_err().to_string();
            assert!(msg.contains(needle), "{text:?}: {msg}");
        }
        let mut doc = ConfigDoc::parse("\n[t]\nrounds = many\nextra = 1\n").unwrap();
        assert!(doc.get_or("t", "rounds", 0usize).unwrap_err().to_string().contains("line 3"));
        assert!(doc.reject_unused().unwrap_err().to_string().contains("t.extra"));
    }
}
