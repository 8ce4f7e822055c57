//! Server configuration: a TOML file, then `ABA_*` environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use aba_core::access::AccountConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub bind: String,
    /// Holds `sessions/`, `decks/`, `assets/` and `audit.jsonl`.
    pub data_dir: PathBuf,
    /// Server-side secret mixed into every credential hash.
    pub pepper: String,
    /// Curriculum JSON. The built-in placeholder curriculum is used when unset.
    pub curriculum: Option<PathBuf>,
    pub token_ttl_secs: u64,
    pub patient_token_ttl_secs: u64,
    pub auto_end_after_secs: u64,
    pub sweep_interval_secs: u64,
    /// Answer responses remembered for idempotent retries.
    pub idempotency_capacity: usize,
    pub accounts: Vec<AccountConfig>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            pepper: String::new(),
            curriculum: None,
            token_ttl_secs: 8 * 3600,
            patient_token_ttl_secs: 12 * 3600,
            auto_end_after_secs: 12 * 3600,
            sweep_interval_secs: 60,
            idempotency_capacity: 10_000,
            accounts: Vec::new(),
        }
    }
}

pub const MIN_PEPPER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{var}={value}: {reason}")]
    Env { var: &'static str, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => Self::from_file(p)?,
            None => Config::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })
    }

    /// Applies `ABA_BIND`, `ABA_DATA_DIR`, `ABA_PEPPER`, `ABA_CURRICULUM`,
    /// `ABA_TOKEN_TTL_SECS`, `ABA_PATIENT_TOKEN_TTL_SECS`,
    /// `ABA_AUTO_END_AFTER_SECS`, `ABA_SWEEP_INTERVAL_SECS` and
    /// `ABA_IDEMPOTENCY_CAPACITY`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn number<T: std::str::FromStr>(var: &'static str, value: String) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::Env { var, value, reason: "not a number".into() })
        }
        if let Some(v) = get("ABA_BIND") {
            self.bind = v;
        }
        if let Some(v) = get("ABA_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("ABA_PEPPER") {
            self.pepper = v;
        }
        if let Some(v) = get("ABA_CURRICULUM") {
            self.curriculum = Some(v.into());
        }
        if let Some(v) = get("ABA_TOKEN_TTL_SECS") {
            self.token_ttl_secs = number("ABA_TOKEN_TTL_SECS", v)?;
        }
        if let Some(v) = get("ABA_PATIENT_TOKEN_TTL_SECS") {
            self.patient_token_ttl_secs = number("ABA_PATIENT_TOKEN_TTL_SECS", v)?;
        }
        if let Some(v) = get("ABA_AUTO_END_AFTER_SECS") {
            self.auto_end_after_secs = number("ABA_AUTO_END_AFTER_SECS", v)?;
        }
        if let Some(v) = get("ABA_SWEEP_INTERVAL_SECS") {
            self.sweep_interval_secs = number("ABA_SWEEP_INTERVAL_SECS", v)?;
        }
        if let Some(v) = get("ABA_IDEMPOTENCY_CAPACITY") {
            self.idempotency_capacity = number("ABA_IDEMPOTENCY_CAPACITY", v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.bind.parse::<SocketAddr>().is_err() {
            return invalid(format!("bind address {:?} is not host:port", self.bind));
        }
        if self.pepper.len() < MIN_PEPPER_LEN {
            return invalid(format!("pepper must be at least {MIN_PEPPER_LEN} bytes (set ABA_PEPPER)"));
        }
        for (name, v) in [
            ("token_ttl_secs", self.token_ttl_secs),
            ("patient_token_ttl_secs", self.patient_token_ttl_secs),
            ("auto_end_after_secs", self.auto_end_after_secs),
            ("sweep_interval_secs", self.sweep_interval_secs),
        ] {
            if v == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.accounts {
            if !seen.insert(&a.subject_id) {
                return invalid(format!("account {} is listed twice", a.subject_id));
            }
        }
        Ok(())
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.data_dir.join("sessions")
    }

    pub fn decks_dir(&self) -> PathBuf {
        self.data_dir.join("decks")
    }

    pub fn assets_dir(&self) -> PathBuf {
        self.data_dir.join("assets")
    }

    pub fn audit_path(&self) -> PathBuf {
        self.data_dir.join("audit.jsonl")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_file_values() {
        let mut c: Config = toml::from_str("bind = \"0.0.0.0:9000\"\npepper = \"from-file-0123456789\"").unwrap();
        c.apply_env(|k| match k {
            "ABA_BIND" => Some("127.0.0.1:7000".into()),
            "ABA_SWEEP_INTERVAL_SECS" => Some("5".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.bind, "127.0.0.1:7000");
        assert_eq!(c.sweep_interval_secs, 5);
        assert_eq!(c.pepper, "from-file-0123456789");
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = Config { pepper: "x".repeat(16), ..Config::default() };
        assert!(c.apply_env(|k| (k == "ABA_TOKEN_TTL_SECS").then(|| "soon".into())).is_err());
        c.pepper = "short".into();
        assert!(c.validate().unwrap_err().to_string().contains("ABA_PEPPER"));
        assert!(toml::from_str::<Config>("colour = 1").is_err());
    }
}
