//! Minimal `key = value` text format with `[section]` headers, shared by the
//! scenario configuration and the trained-parameter files.
//!
//! Blank lines and lines starting with `#` are ignored; a `#` after a value
//! starts a trailing comment.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvDoc {
    entries: Vec<Entry>,
    sections: Vec<String>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc { entries: Vec::new(), sections: vec![String::new()] };
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {line_no}: unterminated section header")))?
                    .trim();
                if name.is_empty() {
                    return Err(Error::config(format!("line {line_no}: empty section name")));
                }
                if doc.sections.iter().any(|s| s == name) {
                    return Err(Error::config(format!("line {line_no}: duplicate section [{name}]")));
                }
                section = name.to_string();
                doc.sections.push(section.clone());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {line_no}: expected `key = value`")))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::config(format!("line {line_no}: missing key")));
            }
            if doc.get(&section, key).is_some() {
                return Err(Error::config(format!("line {line_no}: duplicate key `{key}`")));
            }
            doc.entries.push(Entry {
                section: section.clone(),
                key: key.to_string(),
                value: v.trim().to_string(),
                line: line_no,
            });
        }
        Ok(doc)
    }

    /// Section names in file order; the unnamed top section comes first.
    pub fn sections(&self) -> &[String] {
        &self.sections
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_in<'a>(&'a self, section: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.section == section)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.section == section && e.key == key)
    }

    pub fn parse_value<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|_| {
                Error::config(format!("line {}: cannot parse `{}` for key `{key}`", e.line, e.value))
            }),
        }
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        self.parse_value(section, key)?.ok_or_else(|| {
            let where_ = if section.is_empty() { String::new() } else { format!(" in [{section}]") };
            Error::config(format!("missing key `{key}`{where_}"))
        })
    }
}

/// Writer producing the same format.
#[derive(Debug, Default)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        let _ = writeln!(self.out, "[{name}]");
        self
    }

    pub fn kv(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {value}");
        self
    }

    pub fn finish(self) -> String {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let doc = KvDoc::parse("a = 1\n# note\n[s]\nb = x y  # trailing\n").unwrap();
        assert_eq!(doc.require::<u32>("", "a").unwrap(), 1);
        assert_eq!(doc.get("s", "b").unwrap().value, "x y");
        assert_eq!(doc.sections(), &["".to_string(), "s".to_string()]);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(KvDoc::parse("novalue\n").is_err());
        assert!(KvDoc::parse("[s\n").is_err());
        assert!(KvDoc::parse("a = 1\na = 2\n").is_err());
        let doc = KvDoc::parse("a = x\n").unwrap();
        assert!(doc.require::<f64>("", "a").is_err());
        assert!(doc.require::<f64>("", "b").is_err());
    }

    #[test]
    fn writer_round_trips() {
        let mut w = KvWriter::new();
        w.kv("v", 0.1 + 0.2).section("t").kv("w", -3);
        let doc = KvDoc::parse(&w.finish()).unwrap();
        assert_eq!(doc.require::<f64>("", "v").unwrap(), 0.1 + 0.2);
        assert_eq!(doc.require::<i32>("t", "w").unwrap(), -3);
    }
}
