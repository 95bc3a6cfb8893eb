//! `key = value` text configs. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed entries; consumers `take` the keys they understand and then call
/// [`KeyValues::finish`] so leftovers are reported.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax {
                line: i + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::ConfigSyntax {
                    line: i + 1,
                    reason: format!("bad key `{k}`"),
                });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::ConfigSyntax {
                    line: i + 1,
                    reason: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Remove and parse `key`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e: T::Err| Error::ConfigValue {
                key: key.to_string(),
                reason: format!("`{v}`: {e}"),
            }),
        }
    }

    /// Error if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            Err(Error::UnknownConfigKeys(self.entries.into_keys().collect()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parsing_rules() {
        assert_eq!(KeyValues::parse("").unwrap(), KeyValues::default());
        let mut kv = KeyValues::parse("# c\nlambda1 = 0.01\n\n batch=4 # trailing\n").unwrap();
        assert_eq!(kv.take::<f64>("lambda1").unwrap(), Some(0.01));
        assert_eq!(kv.take::<usize>("batch").unwrap(), Some(4));
        assert_eq!(kv.take::<usize>("crop").unwrap(), None);
        kv.finish().unwrap();
        assert!(matches!(KeyValues::parse("a = 1\na = 2"), Err(Error::ConfigSyntax { line: 2, .. })));
        assert!(matches!(KeyValues::parse("a = 1\nnonsense"), Err(Error::ConfigSyntax { line: 2, .. })));
        let mut kv = KeyValues::parse("batch = x\nzzz = 1").unwrap();
        assert!(matches!(kv.take::<usize>("batch"), Err(Error::ConfigValue { .. })));
        assert!(matches!(kv.finish(), Err(Error::UnknownConfigKeys(k)) if k == vec!["zzz".to_string()]));
    }
}
