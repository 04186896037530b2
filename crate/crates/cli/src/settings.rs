//! Effective run settings: command-line flag, else config file, else default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use crate::UsageError;

#[derive(Debug, Default, Clone)]
pub struct Settings {
    file: BTreeMap<String, String>,
    effective: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut file = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(UsageError(format!(
                    "config line {}: expected 'key = value', got '{raw}'",
                    n + 1
                )));
            };
            file.insert(normalize(k), v.trim().to_string());
        }
        Ok(Self {
            file,
            effective: BTreeMap::new(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    /// Resolves `key` and records the value for `run.cfg`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let key = normalize(key);
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(&key) {
                Some(text) => text
                    .parse()
                    .map_err(|e| UsageError(format!("config key '{key}': cannot parse '{text}': {e}")))?,
                None => default,
            },
        };
        self.effective.insert(key, value.to_string());
        Ok(value)
    }

    /// Like [`get`](Self::get) without a default; absent keys stay unrecorded.
    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let k = normalize(key);
        if flag.is_none() && !self.file.contains_key(&k) {
            return Ok(None);
        }
        let fallback = || -> Result<T> {
            let text = &self.file[&k];
            text.parse()
                .map_err(|e| UsageError(format!("config key '{k}': cannot parse '{text}': {e}")).into())
        };
        let v = match flag {
            Some(v) => v,
            None => fallback()?,
        };
        self.effective.insert(k, v.to_string());
        Ok(Some(v))
    }

    pub fn record(&mut self, key: &str, value: impl Display) {
        self.effective.insert(normalize(key), value.to_string());
    }

    /// Config keys that no setting asked for.
    pub fn unused(&self) -> Vec<&str> {
        self.file
            .keys()
            .filter(|k| !self.effective.contains_key(*k))
            .map(String::as_str)
            .collect()
    }

    pub fn echo(&self) -> String {
        self.effective.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        for k in self.unused() {
            log::warn!("config key '{k}' is not used by this command");
        }
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("run.cfg"), self.echo()).context("writing run.cfg")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let mut s = Settings::parse("# comment\ngamma = 2   # inline\nlr=0.5\n").unwrap();
        assert_eq!(s.get("gamma", Some(3.0), 0.0).unwrap(), 3.0);
        assert_eq!(s.get("lr", None, 0.01).unwrap(), 0.5);
        assert_eq!(s.get("epochs", None::<usize>, 200).unwrap(), 200);
        assert_eq!(s.echo(), "epochs = 200\ngamma = 3\nlr = 0.5\n");
        assert!(s.unused().is_empty());
    }

    #[test]
    fn dashed_keys_and_errors() {
        let mut s = Settings::parse("final-lr = 1e-4\nbatch = x\n").unwrap();
        assert_eq!(s.get_opt::<f64>("final_lr", None).unwrap(), Some(1e-4));
        assert!(s.get("batch", None, 64usize).is_err());
        assert!(Settings::parse("no equals sign").is_err());
    }
}
