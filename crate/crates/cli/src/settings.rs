//! Effective settings for one command: command-line flags layered over an
//! optional flat `key=value` config file, layered over built-in defaults.
//! The values actually used are echoed to `<out>/<command>.config.echo`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

use crate::Exit;

#[derive(Debug, Default)]
pub struct Settings {
    command: String,
    values: BTreeMap<String, String>,
    /// Keys set on the command line or in the config file.
    explicit: BTreeSet<String>,
}

/// Keys are flag names without the leading dashes; underscores are accepted
/// in place of hyphens.
fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

pub fn parse_config(text: &str, path: &Path) -> Result<BTreeMap<String, String>, Exit> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Exit::usage(format!("{}:{}: expected key=value, got {line:?}", path.display(), n + 1)));
        };
        let key = normalize(k);
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Exit::usage(format!("{}:{}: duplicate key {key:?}", path.display(), n + 1)));
        }
    }
    Ok(out)
}

impl Settings {
    pub fn resolve(cmd: &Command, m: &ArgMatches) -> Result<Self, Exit> {
        let known: BTreeSet<String> = cmd
            .get_arguments()
            .map(|a| a.get_id().to_string())
            .filter(|id| !matches!(id.as_str(), "config" | "help" | "version" | "verbose"))
            .collect();

        let file = match m.get_one::<String>("config") {
            Some(p) => {
                let path = Path::new(p);
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Exit::io(format!("cannot read config {}: {e}", path.display())))?;
                parse_config(&text, path)?
            }
            None => BTreeMap::new(),
        };
        if let Some(bad) = file.keys().find(|k| !known.contains(*k)) {
            return Err(Exit::usage(format!(
                "unknown config key {bad:?} for {}; allowed: {}",
                cmd.get_name(),
                known.iter().cloned().collect::<Vec<_>>().join(", ")
            )));
        }

        let mut s = Settings {
            command: cmd.get_name().to_string(),
            ..Default::default()
        };
        for id in &known {
            let raw = || -> Option<String> {
                let vals: Vec<String> = m.get_raw(id)?.map(|v| v.to_string_lossy().into_owned()).collect();
                Some(vals.join(","))
            };
            match m.value_source(id) {
                Some(ValueSource::CommandLine) | Some(ValueSource::EnvVariable) => {
                    s.explicit.insert(id.clone());
                    if let Some(v) = raw() {
                        s.values.insert(id.clone(), v);
                    }
                }
                _ => {
                    if let Some(v) = file.get(id) {
                        s.explicit.insert(id.clone());
                        s.values.insert(id.clone(), v.clone());
                    } else if let Some(v) = raw() {
                        s.values.insert(id.clone(), v);
                    }
                }
            }
        }
        Ok(s)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, Exit>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| Exit::usage(format!("invalid value {v:?} for {key}: {e}"))))
            .transpose()
    }

    pub fn require<T>(&self, key: &str) -> Result<T, Exit>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| Exit::usage(format!("missing required setting {key}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, Exit> {
        Ok(self.get::<bool>(key)?.unwrap_or(false))
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Records the value actually used, for the echo file.
    pub fn record(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write_echo(&self, dir: &Path) -> Result<(), Exit> {
        let path = dir.join(format!("{}.config.echo", self.command));
        log::info!("effective settings written to {}", path.display());
        std::fs::write(&path, self.echo()).map_err(|e| Exit::io(format!("cannot write {}: {e}", path.display())))
    }
}
