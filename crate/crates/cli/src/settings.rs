//! `key = value` run settings with flag overrides and an echo of what was used.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    effective: BTreeMap<String, String>,
}

impl Settings {
    /// Reads the optional config file and rejects keys outside `allowed`.
    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!(
                        "config line {}: expected 'key = value'",
                        lineno + 1
                    ))
                })?;
                let k = k.trim();
                if !allowed.contains(&k) {
                    return Err(CliError::Usage(format!(
                        "config line {}: unknown key '{k}' (allowed: {})",
                        lineno + 1,
                        allowed.join(", ")
                    )));
                }
                if values.insert(k.to_string(), v.trim().to_string()).is_some() {
                    return Err(CliError::Usage(format!("config key '{k}' given twice")));
                }
            }
        }
        Ok(Self {
            values,
            effective: BTreeMap::new(),
        })
    }

    /// Flag value if present, else the config value, else `default`.
    pub fn resolve<T>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: Option<T>,
    ) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.values.get(key) {
                Some(raw) => Some(raw.parse::<T>().map_err(|e| {
                    CliError::Usage(format!("config key '{key}': cannot parse '{raw}': {e}"))
                })?),
                None => default,
            },
        };
        if let Some(v) = &value {
            self.effective.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.resolve(key, flag, None)?.ok_or_else(|| {
            CliError::Usage(format!(
                "missing required setting '{key}' (flag --{key} or config)"
            ))
        })
    }

    pub fn record(&mut self, key: &str, value: impl Display) {
        self.effective.insert(key.to_string(), value.to_string());
    }

    /// Effective settings, one `key = value` per line in key order.
    pub fn to_text(&self) -> String {
        self.effective
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
