//! Flat `key = value` configuration files. Blank lines and text after `#`
//! are ignored; keys may repeat only if the later value is identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: invalid key '{k}'", i + 1)));
            }
            if let Some(prev) = entries.insert(k.to_string(), v.to_string()) {
                if prev != v {
                    return Err(Error::Config(format!("line {}: '{k}' set twice", i + 1)));
                }
            }
        }
        Ok(Config { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("'{key}': cannot parse '{v}'")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing key '{key}'")))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("'{key}': cannot parse '{s}'")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Rejects keys that are not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }

    /// Rendering accepted by [`Config::parse`], keys sorted.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_types() {
        let c = Config::parse("# header\nwidth = 32 # base\n\nlr=5e-4\nenc = 1, 1,1,28\nflip = true\n").unwrap();
        assert_eq!(c.require::<usize>("width").unwrap(), 32);
        assert_eq!(c.get::<f64>("lr").unwrap(), Some(5e-4));
        assert_eq!(c.get_list::<usize>("enc").unwrap().unwrap(), vec![1, 1, 1, 28]);
        assert!(c.require::<bool>("flip").unwrap());
        assert_eq!(c.get_or("missing", 7).unwrap(), 7);
        assert!(c.require::<u32>("missing").is_err());
        assert!(c.get::<usize>("lr").is_err());
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["novalue\n", "= 3\n", "a b = 1\n", "a = 1\na = 2\n"] {
            assert!(matches!(Config::parse(bad), Err(Error::Config(_))), "{bad:?}");
        }
        assert!(Config::parse("a = 1\na = 1\n").is_ok());
    }

    #[test]
    fn render_round_trip_and_known_keys() {
        let c = Config::parse("b = 2\na = x y\n").unwrap();
        assert_eq!(Config::parse(&c.render()).unwrap(), c);
        assert!(c.check_known(&["a", "b"]).is_ok());
        assert!(c.check_known(&["a"]).is_err());
    }
}
