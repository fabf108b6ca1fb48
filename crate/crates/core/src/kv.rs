//! Plain-text `key=value` files used for configs, manifests and the metadata
//! block of checkpoints.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key=value map. Serializes with keys sorted, one pair per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key=value` lines. Blank lines and lines starting with `#` are
    /// skipped; whitespace around keys and values is trimmed.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected key=value, got `{line}`", lineno + 1)));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("duplicate key `{k}`")));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn insert_list<T: Display>(&mut self, key: &str, values: &[T]) {
        let s: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.insert(key, s.join(","));
    }

    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(format!("key `{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn required<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.parsed(key)?.ok_or_else(|| Error::config(format!("missing key `{key}`")))
    }

    /// Comma-separated list value.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::config(format!("key `{key}`: cannot parse `{s}`: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fixed-length list value.
    pub fn array<T: FromStr + Copy, const N: usize>(&self, key: &str) -> Result<Option<[T; N]>>
    where
        T::Err: Display,
    {
        match self.list::<T>(key)? {
            None => Ok(None),
            Some(v) => <[T; N]>::try_from(v.as_slice())
                .map(Some)
                .map_err(|_| Error::config(format!("key `{key}` needs {N} comma-separated values, got {}", v.len()))),
        }
    }

    /// Rejects any key outside `allowed`, naming the first offender.
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::config(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let kv = KeyValues::parse("# comment\n b = 2\n\na=x=y\nlist=1, 2,3\n").unwrap();
        assert_eq!(kv.get("a"), Some("x=y"));
        assert_eq!(kv.required::<u32>("b").unwrap(), 2);
        assert_eq!(kv.list::<u8>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(kv.array::<u8, 3>("list").unwrap(), Some([1, 2, 3]));
        assert!(kv.array::<u8, 2>("list").is_err());
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap(), kv);
    }

    #[test]
    fn errors_name_the_key() {
        let kv = KeyValues::parse("epochs=ten\nbogus=1").unwrap();
        let e = kv.required::<u32>("epochs").unwrap_err().to_string();
        assert!(e.contains("epochs"));
        let e = kv.check_known(&["epochs"]).unwrap_err().to_string();
        assert!(e.contains("bogus"));
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
    }
}
