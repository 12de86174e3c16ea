//! Plain-text `key = value` files, used for protocol schemas and archive
//! metadata. Blank lines and `#` comments are ignored; order is preserved.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{BefaError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    pub entries: Vec<KvEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: u64,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = (i + 1) as u64;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| BefaError::Malformed {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(BefaError::Malformed {
                    line,
                    message: "empty key".into(),
                });
            }
            entries.push(KvEntry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(KvFile { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BefaError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        let line = self.entries.len() as u64 + 1;
        self.entries.push(KvEntry {
            key: key.into(),
            value: value.to_string(),
            line,
        });
    }

    /// First value stored under `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.key == key)
            .map(|e| e.value.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| BefaError::Archive(format!("missing key `{key}`")))
    }

    pub fn require_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| BefaError::Archive(format!("cannot parse `{key} = {v}`")))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{} = {}", e.key, e.value);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| BefaError::io(path, e))
    }
}
