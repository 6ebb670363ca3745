use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;

/// A problem with the invocation itself; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

pub const KEYS: &[&str] = &[
    "seed",
    "n_passages",
    "n_train",
    "n_eval",
    "preset",
    "epochs",
    "warmup_epochs",
    "batch_size",
    "learning_rate",
    "lambda",
    "tau_t",
    "tau_r",
    "n_hard",
    "filler_prob",
    "grad_clip",
    "dev_size",
    "boundary_b",
    "boundary_t",
    "k",
    "share_layer_b",
    "encoding",
    "frozen",
    "index_kind",
    "pq_m",
    "pq_bits",
    "host",
    "port",
    "max_connections",
    "max_new_tokens",
    "compression",
    "keep_ratio",
    "seeds",
    "grid",
];

/// Flat `key = value` settings file; command-line flags take precedence.
#[derive(Debug, Default)]
pub struct Settings {
    table: toml::Table,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Usage(format!("bad config: {e}")))?;
        for (key, value) in &table {
            if !KEYS.contains(&key.as_str()) {
                return usage(format!("unknown config key {key:?}"));
            }
            if value.is_table() {
                return usage(format!("config key {key:?}: nested tables are not supported"));
            }
        }
        Ok(Self { table })
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> anyhow::Result<Option<T>> {
        debug_assert!(KEYS.contains(&key), "unregistered key {key}");
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| Usage(format!("config key {key:?}: {e}")).into()),
        }
    }

    /// Flag value, else the file value, else `default`.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> anyhow::Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    pub fn pick_opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> anyhow::Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let s = Settings::parse("epochs = 4\nlearning_rate = 0.01\nencoding = \"independent\"").unwrap();
        assert_eq!(s.pick(Some(2usize), "epochs", 10).unwrap(), 2);
        assert_eq!(s.pick(None, "epochs", 10usize).unwrap(), 4);
        assert_eq!(s.pick(None, "batch_size", 4usize).unwrap(), 4);
        assert_eq!(s.pick::<f64>(None, "learning_rate", 1.0).unwrap(), 0.01);
        assert_eq!(s.get::<String>("encoding").unwrap().as_deref(), Some("independent"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_types() {
        assert!(Settings::parse("epoch = 4").unwrap_err().downcast_ref::<Usage>().is_some());
        let s = Settings::parse("epochs = \"many\"").unwrap();
        assert!(s.get::<usize>("epochs").unwrap_err().downcast_ref::<Usage>().is_some());
        assert!(Settings::parse("[section]\nepochs = 1").is_err());
    }
}
