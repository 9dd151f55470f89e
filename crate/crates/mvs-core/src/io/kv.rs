//! Flat key-value text format used for pipeline configuration, scene
//! specifications, and run manifests.
//!
//! One `key = value` pair per line; `#` starts a comment; values may hold
//! several whitespace-separated tokens. Keys are unique, order-preserving.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        let mut offset = 0usize;
        for line in text.split('\n') {
            let line_start = offset;
            offset += line.len() + 1;
            let content = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            };
            let content = content.trim();
            if content.is_empty() {
                continue;
            }
            let eq = content.find('=').ok_or_else(|| {
                Error::format(
                    origin,
                    line_start,
                    format!("missing '=' in line '{content}'"),
                )
            })?;
            let key = content[..eq].trim().to_string();
            let value = content[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::format(origin, line_start, "empty key"));
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(Error::format(
                    origin,
                    line_start,
                    format!("duplicate key '{key}'"),
                ));
            }
            entries.push((key, value));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::pfm::write_file(path, self.serialize().as_bytes())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        let value = value.to_string();
        if let Some(entry) = self.entries.iter_mut().find(|(k, _)| k == key) {
            entry.1 = value;
        } else {
            self.entries.push((key.to_string(), value));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::config(format!("key '{key}': bad float '{v}'")))
            })
            .transpose()
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::config(format!("key '{key}': bad integer '{v}'")))
            })
            .transpose()
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::config(format!("key '{key}': bad integer '{v}'")))
            })
            .transpose()
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(Error::config(format!("key '{key}': bad bool '{other}'"))),
            })
            .transpose()
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key)
            .map(|v| {
                v.split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| Error::config(format!("key '{key}': bad float '{t}'")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.get(key)
            .map(|v| {
                v.split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| Error::config(format!("key '{key}': bad integer '{t}'")))
                    })
                    .collect()
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KvMap::parse(
            "# scene\na = 1.5\nlist = 1 2 3  # inline comment\nflag = true\n",
            "test",
        )
        .unwrap();
        assert_eq!(kv.get_f64("a").unwrap(), Some(1.5));
        assert_eq!(kv.get_usize_list("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(kv.get_bool("flag").unwrap(), Some(true));
        assert_eq!(kv.get("missing"), None);
    }

    #[test]
    fn rejects_duplicates_and_missing_equals() {
        assert!(KvMap::parse("a = 1\na = 2\n", "test").is_err());
        assert!(KvMap::parse("just a line\n", "test").is_err());
    }

    #[test]
    fn round_trips_through_serialize() {
        let mut kv = KvMap::new();
        kv.set("x", 42);
        kv.set("name", "plane scene");
        let text = kv.serialize();
        let again = KvMap::parse(&text, "mem").unwrap();
        assert_eq!(again.get("x"), Some("42"));
        assert_eq!(again.get("name"), Some("plane scene"));
    }
}
