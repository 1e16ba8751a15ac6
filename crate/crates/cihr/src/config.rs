//! Flat `key = value` training configuration.

use std::path::Path;

use crate::commonality::BackendKind;
use crate::data::SplitMode;
use crate::model::Ablation;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("i/o reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {value:?}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub k: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub n_a: usize,
    pub n_d: usize,
    pub min_freq: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_pretrained_group: f64,
    pub lr_other_group: f64,
    pub seed: u64,
    pub ln_eps: f64,
    pub adam_eps: f64,
    pub backend: BackendKind,
    pub ablation: Ablation,
    pub split_mode: SplitMode,
    /// Stop as soon as validation accuracy (percent) reaches this value.
    pub early_stop_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            d: 64,
            k: 2,
            n_layers: 2,
            max_len: 64,
            n_a: 6,
            n_d: 4,
            min_freq: 1,
            batch_size: 32,
            max_epochs: 20,
            lr_pretrained_group: 2e-5,
            lr_other_group: 2e-3,
            seed: 42,
            ln_eps: 1e-5,
            adam_eps: 1e-8,
            backend: BackendKind::Stub,
            ablation: Ablation::None,
            split_mode: SplitMode::ByUser,
            early_stop_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<TrainConfig, ConfigError> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
            };
            match key {
                "d" => cfg.d = value.parse().map_err(|_| bad())?,
                "k" => cfg.k = value.parse().map_err(|_| bad())?,
                "n_layers" => cfg.n_layers = value.parse().map_err(|_| bad())?,
                "max_len" => cfg.max_len = value.parse().map_err(|_| bad())?,
                "n_a" => cfg.n_a = value.parse().map_err(|_| bad())?,
                "n_d" => cfg.n_d = value.parse().map_err(|_| bad())?,
                "min_freq" => cfg.min_freq = value.parse().map_err(|_| bad())?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad())?,
                "max_epochs" => cfg.max_epochs = value.parse().map_err(|_| bad())?,
                "lr_pretrained_group" => {
                    cfg.lr_pretrained_group = value.parse().map_err(|_| bad())?
                }
                "lr_other_group" => cfg.lr_other_group = value.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "ln_eps" => cfg.ln_eps = value.parse().map_err(|_| bad())?,
                "adam_eps" => cfg.adam_eps = value.parse().map_err(|_| bad())?,
                "backend" => cfg.backend = BackendKind::parse(value).ok_or_else(bad)?,
                "ablation" => cfg.ablation = Ablation::parse(value).ok_or_else(bad)?,
                "split_mode" => cfg.split_mode = SplitMode::parse(value).ok_or_else(bad)?,
                "early_stop_acc" => cfg.early_stop_acc = Some(value.parse().map_err(|_| bad())?),
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        TrainConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 || self.k == 0 || self.d % self.k != 0 {
            return Err(ConfigError::Invalid(format!(
                "d ({}) must be a positive multiple of k ({})",
                self.d, self.k
            )));
        }
        if self.n_layers == 0 || self.max_len < 4 || self.batch_size == 0 {
            return Err(ConfigError::Invalid(
                "n_layers, batch_size must be positive; max_len must be at least 4".into(),
            ));
        }
        if !(self.n_a == 1 || self.n_a == 6 || self.n_a == 7) {
            return Err(ConfigError::Invalid(format!(
                "n_a must be 1, 6, or 7, got {}",
                self.n_a
            )));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; `parse` inverts it.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("d", self.d.to_string());
        kv("k", self.k.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("max_len", self.max_len.to_string());
        kv("n_a", self.n_a.to_string());
        kv("n_d", self.n_d.to_string());
        kv("min_freq", self.min_freq.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("lr_pretrained_group", format!("{:e}", self.lr_pretrained_group));
        kv("lr_other_group", format!("{:e}", self.lr_other_group));
        kv("seed", self.seed.to_string());
        kv("ln_eps", format!("{:e}", self.ln_eps));
        kv("adam_eps", format!("{:e}", self.adam_eps));
        kv("backend", self.backend.name().to_string());
        kv("ablation", self.ablation.name().to_string());
        kv("split_mode", self.split_mode.name().to_string());
        if let Some(a) = self.early_stop_acc {
            kv("early_stop_acc", format!("{a}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = TrainConfig::parse("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        let cfg = TrainConfig::parse("d = 32\nk=4\n# comment\nbackend = replay\n").unwrap();
        assert_eq!(cfg.d, 32);
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.backend, BackendKind::Replay);
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = TrainConfig::parse("d = 32\nlearning_rate = 0.1\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "learning_rate");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_values_rejected() {
        assert!(matches!(
            TrainConfig::parse("d = many\n").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
        assert!(matches!(
            TrainConfig::parse("ablation = everything\n").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
        assert!(matches!(
            TrainConfig::parse("just words\n").unwrap_err(),
            ConfigError::BadLine { .. }
        ));
    }

    #[test]
    fn validation_constraints() {
        assert!(TrainConfig::parse("d = 30\nk = 4\n").is_err());
        assert!(TrainConfig::parse("n_a = 3\n").is_err());
        assert!(TrainConfig::parse("n_a = 7\n").is_ok());
    }

    #[test]
    fn config_string_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.d = 48;
        cfg.k = 3;
        cfg.early_stop_acc = Some(92.5);
        cfg.ablation = Ablation::NoSf;
        let parsed = TrainConfig::parse(&cfg.to_config_string()).unwrap();
        assert_eq!(parsed, cfg);
    }
}
