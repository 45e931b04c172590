//! Flat `key = value` configuration files.
//!
//! Keys before the first `[section]` header apply to every command; keys in
//! `[fit]`, `[simulate]` or `[study]` apply to that command and override the
//! top-level ones. `#` starts a comment. Command-line flags override both.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

const SECTIONS: [&str; 3] = ["fit", "simulate", "study"];

pub const FIT_KEYS: &[&str] = &[
    "threads",
    "seed",
    "model",
    "input",
    "out",
    "dump_draws",
    "covariates",
    "n_burn",
    "n_thin",
    "n_s",
    "step_scale",
    "warm_burn",
    "se_factor",
    "compute_se",
    "delta1",
    "delta2",
    "consecutive",
    "max_iter",
    "block",
    "drift_z",
];

pub const SIMULATE_KEYS: &[&str] = &[
    "threads",
    "seed",
    "model",
    "out",
    "setting",
    "n",
    "n_types",
    "copula",
    "alpha",
    "beta",
    "censor_rate",
    "admin_cutoff",
];

pub const STUDY_KEYS: &[&str] = &[
    "threads",
    "seed",
    "model",
    "out",
    "setting",
    "n",
    "n_types",
    "copula",
    "alpha",
    "beta",
    "censor_rate",
    "admin_cutoff",
    "replicates",
    "replicates_out",
    "n_burn",
    "n_thin",
    "n_s",
    "step_scale",
    "warm_burn",
    "se_factor",
    "compute_se",
    "delta1",
    "delta2",
    "consecutive",
    "max_iter",
    "block",
    "drift_z",
];

impl Settings {
    /// Parses `text` for `command`, keeping top-level keys and that
    /// command's section.
    pub fn parse(text: &str, command: &str, allowed: &[&str]) -> Result<Self, String> {
        let mut top = BTreeMap::new();
        let mut own = BTreeMap::new();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(format!("line {}: unknown section [{name}]", n + 1));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            match section.as_deref() {
                None => {
                    top.insert(k, v);
                }
                Some(s) if s == command => {
                    if !allowed.contains(&k.as_str()) {
                        return Err(format!("line {}: unknown key {k:?} in [{s}]", n + 1));
                    }
                    own.insert(k, v);
                }
                Some(_) => {}
            }
        }
        // top-level keys meant for other commands are ignored
        top.retain(|k, _| allowed.contains(&k.as_str()));
        top.extend(own);
        Ok(Settings { values: top })
    }

    pub fn load(path: &Path, command: &str, allowed: &[&str]) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text, command, allowed).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key).map(|v| v.parse::<T>().map_err(|e| format!("invalid value {v:?} for {key}: {e}"))).transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, String>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().parse::<T>().map_err(|e| format!("invalid entry {s:?} in {key}: {e}")))
                    .collect()
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_override_top_level() {
        let text = "seed = 3\nn_s = 100 # comment\n[fit]\nn_s = 200\n[study]\nn_s = 50\nreplicates = 4\n";
        let s = Settings::parse(text, "fit", FIT_KEYS).unwrap();
        assert_eq!(s.get::<u64>("seed").unwrap(), Some(3));
        assert_eq!(s.get::<usize>("n_s").unwrap(), Some(200));
        assert_eq!(s.raw("replicates"), None);
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        assert!(Settings::parse("[fit]\nn_ss = 1\n", "fit", FIT_KEYS).is_err());
        assert!(Settings::parse("[fitt]\n", "fit", FIT_KEYS).is_err());
        assert!(Settings::parse("[fit]\njunk\n", "fit", FIT_KEYS).is_err());
    }

    #[test]
    fn lists_and_bad_values() {
        let s = Settings::parse("beta = 1, 0.8 ,0.4\nn = many\n", "simulate", SIMULATE_KEYS).unwrap();
        assert_eq!(s.list::<f64>("beta").unwrap(), Some(vec![1.0, 0.8, 0.4]));
        assert!(s.get::<usize>("n").is_err());
    }
}
