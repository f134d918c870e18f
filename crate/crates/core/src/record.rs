//! Flat `key = value` text records.
//!
//! One format serves checkpoints, GradTail state snapshots, run manifests and
//! experiment configs:
//!
//! ```text
//! # comment lines start with '#'
//! format = gradtail-record
//! version = 1
//! kind = mlp-checkpoint
//! model.layer_dims = 2,5,2
//! ```
//!
//! Keys are dotted section paths and appear at most once. Floats are written
//! with Rust's shortest round-trip formatting, so a write/read cycle is
//! bit-exact. Lists are comma separated.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "gradtail-record";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    entries: Vec<(String, String)>,
}

impl Record {
    /// An empty record with the standard `format`/`version`/`kind` header.
    pub fn new(kind: &str) -> Self {
        let mut record = Record::default();
        record.set("format", FORMAT_NAME);
        record.set("version", FORMAT_VERSION);
        record.set("kind", kind);
        record
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut record = Record::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Record(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Record(format!("line {}: empty key", lineno + 1)));
            }
            if record.get(key).is_some() {
                return Err(Error::Record(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            record
                .entries
                .push((key.to_string(), value.trim().to_string()));
        }
        Ok(record)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// Inserts or replaces `key`, keeping first-insertion order.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn set_list<T: Display>(&mut self, key: &str, values: &[T]) {
        let joined = values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        self.set(key, joined);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Record(format!("missing key `{key}`")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Record(format!("bad value for `{key}`: `{raw}`")))
    }

    /// Like [`Record::parse_value`] but returns `default` when the key is absent.
    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            Some(_) => self.parse_value(key),
            None => Ok(default),
        }
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|item| {
                item.trim().parse().map_err(|_| {
                    Error::Record(format!("bad list item for `{key}`: `{}`", item.trim()))
                })
            })
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Checks the header written by [`Record::new`].
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let format = self.require("format")?;
        if format != FORMAT_NAME {
            return Err(Error::Record(format!("unknown format `{format}`")));
        }
        let version: u32 = self.parse_value("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Record(format!("unsupported version {version}")));
        }
        let found = self.require("kind")?;
        if found != kind {
            return Err(Error::Record(format!(
                "expected kind `{kind}`, found `{found}`"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_bit_exact() {
        let values = [0.1, -1e-300, 1.0 / 3.0, f64::MAX, 5e-324];
        let mut r = Record::new("test");
        r.set_list("x", &values);
        let back = Record::parse(&r.to_text()).unwrap();
        let parsed: Vec<f64> = back.parse_list("x").unwrap();
        for (a, b) in values.iter().zip(&parsed) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        back.expect_kind("test").unwrap();
        assert!(back.expect_kind("other").is_err());
    }

    #[test]
    fn comments_and_duplicates() {
        let r = Record::parse("# hello\n\ntrain.steps = 10\n  # indented\n").unwrap();
        assert_eq!(r.parse_value::<usize>("train.steps").unwrap(), 10);
        assert!(Record::parse("a = 1\na = 2\n").is_err());
        assert!(Record::parse("no equals sign\n").is_err());
    }
}
