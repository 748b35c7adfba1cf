//! Flat `key = value` text documents used for configs and checkpoints.
//!
//! One entry per line, `#` starts a comment line, keys are unique. Reals are
//! written with 17 significant digits so they parse back bit-exactly.

use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    Parse {
        key: String,
        value: String,
        expected: &'static str,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_f64s(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ")
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut doc = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax { line: i + 1 });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(KvError::Syntax { line: i + 1 });
            }
            if doc.get(k).is_some() {
                return Err(KvError::Duplicate {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
            doc.entries.push((k.to_string(), v.to_string()));
        }
        Ok(doc)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
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

    /// Sets `key`, replacing an existing value in place.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let (key, value) = (key.into(), value.into());
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn set_f64(&mut self, key: impl Into<String>, x: f64) {
        self.set(key, fmt_f64(x));
    }

    pub fn set_f64s(&mut self, key: impl Into<String>, xs: &[f64]) {
        self.set(key, fmt_f64s(xs));
    }

    pub fn parse_value<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<T, KvError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| KvError::Parse {
            key: key.to_string(),
            value: v.to_string(),
            expected,
        })
    }

    pub fn f64(&self, key: &str) -> Result<f64, KvError> {
        self.parse_value(key, "a real number")
    }

    pub fn usize(&self, key: &str) -> Result<usize, KvError> {
        self.parse_value(key, "a non-negative integer")
    }

    pub fn f64s(&self, key: &str) -> Result<Vec<f64>, KvError> {
        let v = self.require(key)?;
        v.split_whitespace()
            .map(|s| {
                s.parse().map_err(|_| KvError::Parse {
                    key: key.to_string(),
                    value: s.to_string(),
                    expected: "a list of real numbers",
                })
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Appends every entry of `other` with `prefix` prepended to its key.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &KvDoc) {
        for (k, v) in &other.entries {
            self.set(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> KvDoc {
        KvDoc {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_and_render() {
        let doc = KvDoc::parse("# header\na = 1\n\nb = x y z\n").unwrap();
        assert_eq!(doc.get("a"), Some("1"));
        assert_eq!(doc.get("b"), Some("x y z"));
        assert_eq!(KvDoc::parse(&doc.render()).unwrap(), doc);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(matches!(KvDoc::parse("a = 1\na = 2"), Err(KvError::Duplicate { line: 2, .. })));
        assert_eq!(KvDoc::parse("no equals"), Err(KvError::Syntax { line: 1 }));
    }

    proptest! {
        #[test]
        fn reals_round_trip_bit_exactly(xs in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..20)) {
            let mut doc = KvDoc::new();
            doc.set_f64s("v", &xs);
            let back = KvDoc::parse(&doc.render()).unwrap().f64s("v").unwrap();
            prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
