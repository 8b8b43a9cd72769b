//! Flag resolution: command-line flag, then config file, then built-in default.
//!
//! Config files hold `key = value` lines named after long flags (`lr = 0.01`,
//! `prune-pct = 75`). `#` starts a comment. Keys before any `[section]` header
//! are shared by every command and ignored where unused; keys under
//! `[generate]`, `[train]`, `[eval]`, or `[detect]` apply to that command only
//! and must be recognized by it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

#[derive(Debug, Default)]
pub struct ConfigFile {
    shared: BTreeMap<String, String>,
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

pub fn parse_text(text: &str) -> Result<ConfigFile, String> {
    let mut file = ConfigFile::default();
    let mut section: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        let v = v.trim().trim_matches('"').to_string();
        let map = match &section {
            Some(s) => file.sections.entry(s.clone()).or_default(),
            None => &mut file.shared,
        };
        if map.insert(normalize(k), v).is_some() {
            return Err(format!("line {}: duplicate key `{}`", n + 1, k.trim()));
        }
    }
    Ok(file)
}

pub fn parse_file(path: &Path) -> Result<ConfigFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure {
        code: 3,
        message: format!("cannot read config {}: {e}", path.display()),
    })?;
    parse_text(&text).map_err(|m| Failure::usage(format!("config {}: {m}", path.display())))
}

pub struct Settings {
    shared: BTreeMap<String, String>,
    own: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(mut file: ConfigFile, command: &str) -> Result<Self, Failure> {
        let own = file.sections.remove(command).unwrap_or_default();
        Ok(Self { shared: file.shared, own })
    }

    fn lookup<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: Display,
    {
        let raw = self.own.remove(key).or_else(|| self.shared.get(key).cloned());
        raw.map(|v| {
            v.parse::<T>()
                .map_err(|e| Failure::usage(format!("config key `{key}` = `{v}`: {e}")))
        })
        .transpose()
    }

    pub fn get<T: FromStr>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        Ok(self.get_opt(key, flag)?.unwrap_or(default))
    }

    pub fn get_opt<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure>
    where
        T::Err: Display,
    {
        let from_file = self.lookup(key)?;
        Ok(flag.or(from_file))
    }

    /// Fails on section keys the command did not consume.
    pub fn finish(self) -> Result<(), Failure> {
        match self.own.keys().next() {
            Some(k) => Err(Failure::usage(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }
}
