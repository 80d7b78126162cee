//! Flat `key=value` configuration files whose keys mirror CLI flag names.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::dataio::read_file;
use crate::error::{Error, Result};

/// Parsed key/value pairs with the line each came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, (String, usize)>,
    source: String,
}

impl ConfigFile {
    /// Blank lines and lines starting with `#` are ignored. Keys may be
    /// written with or without a leading `--`.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("{source}:{}: expected key=value, got {line:?}", i + 1)))?;
            let key = k.trim().trim_start_matches("--").to_string();
            if key.is_empty() {
                return Err(Error::config(format!("{source}:{}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::config(format!("{source}:{}: duplicate key {key}", i + 1)));
            }
        }
        Ok(Self { entries, source: source.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Parse { path: path.into(), offset: e.utf8_error().valid_up_to(), reason: "not UTF-8".into() })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Typed value; a parse failure names the file, line and key.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(format!("{}:{line}: invalid value {v:?} for {key}: {e}", self.source))),
        }
    }

    /// Error naming the first key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((k, (_, line))) => Err(Error::config(format!("{}:{line}: unknown key {k}", self.source))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_prefixes() {
        let c = ConfigFile::parse("# run\nlr = 0.001\n--epochs=5\n\nprior-z=true\n", "cfg").unwrap();
        assert_eq!(c.get::<f64>("lr").unwrap(), Some(0.001));
        assert_eq!(c.get::<usize>("epochs").unwrap(), Some(5));
        assert_eq!(c.get::<bool>("prior-z").unwrap(), Some(true));
        assert_eq!(c.get::<f64>("seed").unwrap(), None);
    }

    #[test]
    fn errors_name_the_line() {
        let err = ConfigFile::parse("lr=1\nbatch=x\n", "c.txt").unwrap().get::<usize>("batch").unwrap_err();
        assert!(err.to_string().contains("c.txt:2"), "{err}");
        assert!(ConfigFile::parse("novalue\n", "c").is_err());
        assert!(ConfigFile::parse("a=1\na=2\n", "c").is_err());
        let unknown = ConfigFile::parse("lr=1\nbogus=2\n", "c").unwrap().reject_unknown(&["lr"]).unwrap_err();
        assert!(unknown.to_string().contains("bogus"));
    }
}
