//! Run manifests: config echo, seed, and SHA-256 checksums of inputs and
//! artifacts as plain `key=value` lines.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dataio::{read_file, write_atomic};
use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = concat!("bws ", env!("CARGO_PKG_VERSION"));

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<(PathBuf, String)>,
    pub artifacts: Vec<(PathBuf, String)>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self { command: command.into(), seed, ..Default::default() }
    }

    pub fn config(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.into(), value.to_string()));
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sum = sha256_file(path)?;
        self.inputs.push((path.into(), sum));
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let sum = sha256_file(path)?;
        self.artifacts.push((path.into(), sum));
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = format!("tool={TOOL_VERSION}\ncommand={}\nseed={}\n", self.command, self.seed);
        for (k, v) in &self.config {
            out.push_str(&format!("config.{k}={v}\n"));
        }
        for (p, s) in &self.inputs {
            out.push_str(&format!("input.{}=sha256:{s}\n", p.display()));
        }
        for (p, s) in &self.artifacts {
            out.push_str(&format!("artifact.{}=sha256:{s}\n", p.display()));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        for (i, line) in text.lines().enumerate() {
            let bad = || Error::contract(format!("manifest line {}: {line:?}", i + 1));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            if let Some(key) = k.strip_prefix("config.") {
                m.config.push((key.into(), v.into()));
            } else if let Some(p) = k.strip_prefix("input.") {
                m.inputs.push((p.into(), v.strip_prefix("sha256:").ok_or_else(bad)?.into()));
            } else if let Some(p) = k.strip_prefix("artifact.") {
                m.artifacts.push((p.into(), v.strip_prefix("sha256:").ok_or_else(bad)?.into()));
            } else {
                match k {
                    "tool" => {}
                    "command" => m.command = v.into(),
                    "seed" => m.seed = v.parse().map_err(|_| bad())?,
                    _ => return Err(bad()),
                }
            }
        }
        Ok(m)
    }

    /// Paths whose current checksum differs from the recorded one.
    pub fn stale_entries(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .chain(&self.artifacts)
            .filter(|(p, s)| sha256_file(p).map_or(true, |now| &now != s))
            .map(|(p, _)| p.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip_and_verification() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, b"abc").unwrap();
        let mut m = RunManifest::new("eval", 7);
        m.config("lr", 1e-4);
        m.input(&input).unwrap();
        assert_eq!(m.inputs[0].1, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let back = RunManifest::parse(&m.render()).unwrap();
        assert_eq!(back, m);
        assert!(back.stale_entries().is_empty());
        std::fs::write(&input, b"abd").unwrap();
        assert_eq!(back.stale_entries(), vec![input]);
    }
}
