//! Flat `key = value` text documents.
//!
//! Used by the camera rig manifest, scene manifest, condition manifest and
//! pipeline config. Lines starting with `#` are comments and are not kept, so
//! writers that want a header emit it themselves.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: invalid value `{value}`: {msg}")]
    Invalid {
        key: String,
        value: String,
        msg: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut doc = KvDoc::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax {
                    line: i + 1,
                    msg: "expected `key = value`".into(),
                });
            };
            let key = k.trim();
            if !valid_key(key) {
                return Err(KvError::Syntax {
                    line: i + 1,
                    msg: format!("invalid key `{key}`"),
                });
            }
            if doc.get(key).is_some() {
                return Err(KvError::Duplicate(key.to_string()));
            }
            doc.entries.push((key.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    /// Appends a key. Panics on an invalid or duplicate key; writers control
    /// their keys so this is a programming error.
    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        let key = key.into();
        assert!(valid_key(&key), "invalid key `{key}`");
        assert!(self.get(&key).is_none(), "duplicate key `{key}`");
        let value = value.to_string();
        assert!(!value.contains('\n'), "multi-line value for `{key}`");
        self.entries.push((key, value.trim().to_string()));
    }

    /// Replaces an existing value or appends a new key.
    pub fn set(&mut self, key: &str, value: impl Display) -> Result<(), KvError> {
        if !valid_key(key) {
            return Err(KvError::Syntax {
                line: 0,
                msg: format!("invalid key `{key}`"),
            });
        }
        let value = value.to_string().trim().to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key).ok_or_else(|| KvError::Missing(key.to_string()))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T, KvError>
    where
        T::Err: Display,
    {
        let value = self.require(key)?;
        value.parse().map_err(|e: T::Err| KvError::Invalid {
            key: key.to_string(),
            value: value.to_string(),
            msg: e.to_string(),
        })
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError>
    where
        T::Err: Display,
    {
        match self.get(key) {
            Some(_) => self.parsed(key),
            None => Ok(default),
        }
    }

    /// Parses a comma-separated list of values.
    pub fn parsed_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, KvError>
    where
        T::Err: Display,
    {
        let value = self.require(key)?;
        parse_list(value).map_err(|msg| KvError::Invalid {
            key: key.to_string(),
            value: value.to_string(),
            msg,
        })
    }

    /// Parses a finite float, rejecting NaN and infinities.
    pub fn finite(&self, key: &str) -> Result<f64, KvError> {
        let v: f64 = self.parsed(key)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(KvError::Invalid {
                key: key.to_string(),
                value: v.to_string(),
                msg: "not finite".into(),
            })
        }
    }

    pub fn finite_list(&self, key: &str) -> Result<Vec<f64>, KvError> {
        let values: Vec<f64> = self.parsed_list(key)?;
        if values.iter().all(|v| v.is_finite()) {
            Ok(values)
        } else {
            Err(KvError::Invalid {
                key: key.to_string(),
                value: self.get(key).unwrap_or_default().to_string(),
                msg: "not finite".into(),
            })
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self, header: &str) -> String {
        let mut out = String::new();
        for line in header.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

pub fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

pub fn join_list<T: Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_blank_lines() {
        let doc = KvDoc::parse("# hi\n\na = 1\n  b=two words  \n").unwrap();
        assert_eq!(doc.get("a"), Some("1"));
        assert_eq!(doc.get("b"), Some("two words"));
        assert_eq!(doc.len(), 2);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert_eq!(
            KvDoc::parse("a = 1\na = 2"),
            Err(KvError::Duplicate("a".into()))
        );
        assert!(matches!(
            KvDoc::parse("no equals here"),
            Err(KvError::Syntax { line: 1, .. })
        ));
        assert!(KvDoc::parse("bad key = 1").is_err());
    }

    #[test]
    fn typed_access() {
        let doc = KvDoc::parse("n = 8\nxs = 1.5, -2,4\nbad = nan").unwrap();
        assert_eq!(doc.parsed::<usize>("n").unwrap(), 8);
        assert_eq!(doc.finite_list("xs").unwrap(), vec![1.5, -2.0, 4.0]);
        assert!(doc.finite("bad").is_err());
        assert!(matches!(doc.parsed::<usize>("zz"), Err(KvError::Missing(_))));
        assert_eq!(doc.parsed_or("zz", 3usize).unwrap(), 3);
    }

    #[test]
    fn text_roundtrip() {
        let mut doc = KvDoc::new();
        doc.push("x", 0.1f64);
        doc.push("name", "front");
        let text = doc.to_text("header");
        let back = KvDoc::parse(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.to_text("header"), text);
    }
}
