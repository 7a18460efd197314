//! Server configuration: defaults, a TOML file, then `TVC_*` environment
//! overrides, applied in that order.
//!
//! ```toml
//! listen = "127.0.0.1:7070"      # shard i listens on port + i
//! shard_count = 1
//! persist_interval_s = 10
//! persist_dir = "/var/lib/tvcache"   # omit to disable persistence
//! default_snapshot_budget = 64
//! lease_ttl_s = 300
//! max_inflight = 1024            # concurrent requests per shard before 503
//! request_log = "-"              # "-" for stderr, a path, or omit
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{name}: {message}")]
    Env { name: &'static str, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub shard_count: usize,
    pub persist_interval_s: f64,
    pub persist_dir: Option<PathBuf>,
    pub default_snapshot_budget: usize,
    pub lease_ttl_s: f64,
    pub max_inflight: usize,
    pub request_log: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7070".parse().expect("valid default address"),
            shard_count: 1,
            persist_interval_s: 10.0,
            persist_dir: None,
            default_snapshot_budget: 64,
            lease_ttl_s: 300.0,
            max_inflight: 1024,
            request_log: None,
        }
    }
}

impl ServerConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml(&text).map_err(|message| ConfigError::Parse { path: path.into(), message })
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Applies `TVC_LISTEN`, `TVC_PERSIST_DIR`, `TVC_SHARDS`, `TVC_BUDGET`
    /// and `TVC_LEASE_TTL_S`.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        self.apply_vars(|k| std::env::var(k).ok())
    }

    pub fn apply_vars(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(name: &'static str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.trim().parse().map_err(|e: T::Err| ConfigError::Env { name, message: e.to_string() })
        }
        if let Some(v) = get("TVC_LISTEN") {
            self.listen = parse("TVC_LISTEN", &v)?;
        }
        if let Some(v) = get("TVC_PERSIST_DIR") {
            self.persist_dir = (!v.is_empty()).then(|| PathBuf::from(v));
        }
        if let Some(v) = get("TVC_SHARDS") {
            self.shard_count = parse("TVC_SHARDS", &v)?;
        }
        if let Some(v) = get("TVC_BUDGET") {
            self.default_snapshot_budget = parse("TVC_BUDGET", &v)?;
        }
        if let Some(v) = get("TVC_LEASE_TTL_S") {
            self.lease_ttl_s = parse("TVC_LEASE_TTL_S", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.shard_count == 0 {
            return Err(ConfigError::Invalid("shard_count must be at least 1".into()));
        }
        if self.default_snapshot_budget == 0 {
            return Err(ConfigError::Invalid("default_snapshot_budget must be at least 1".into()));
        }
        if !(self.persist_interval_s > 0.0 && self.persist_interval_s.is_finite()) {
            return Err(ConfigError::Invalid("persist_interval_s must be positive".into()));
        }
        if !(self.lease_ttl_s > 0.0 && self.lease_ttl_s.is_finite()) {
            return Err(ConfigError::Invalid("lease_ttl_s must be positive".into()));
        }
        if self.max_inflight == 0 {
            return Err(ConfigError::Invalid("max_inflight must be at least 1".into()));
        }
        if self.listen.port() != 0 && self.listen.port() as usize + self.shard_count - 1 > u16::MAX as usize {
            return Err(ConfigError::Invalid("shard ports exceed 65535".into()));
        }
        Ok(())
    }

    pub fn lease_ttl(&self) -> Duration {
        Duration::from_secs_f64(self.lease_ttl_s)
    }

    pub fn persist_interval(&self) -> Duration {
        Duration::from_secs_f64(self.persist_interval_s)
    }

    /// Listen address of shard `index`; port 0 stays ephemeral.
    pub fn shard_addr(&self, index: usize) -> SocketAddr {
        let mut a = self.listen;
        if a.port() != 0 {
            a.set_port(a.port() + index as u16);
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    #[test]
    fn file_then_env() {
        let mut c = ServerConfig::from_toml("shard_count = 2\ndefault_snapshot_budget = 8\npersist_dir = \"/tmp/x\"\n").unwrap();
        assert_eq!(c.shard_count, 2);
        assert_eq!(c.lease_ttl_s, 300.0);
        let env: HashMap<&str, &str> =
            [("TVC_SHARDS", "4"), ("TVC_LEASE_TTL_S", "1.5"), ("TVC_PERSIST_DIR", "")].into_iter().collect();
        c.apply_vars(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(c.shard_count, 4);
        assert_eq!(c.default_snapshot_budget, 8);
        assert_eq!(c.lease_ttl(), Duration::from_millis(1500));
        assert_eq!(c.persist_dir, None);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ServerConfig::from_toml("shards = 2").is_err());
        let mut c = ServerConfig::default();
        assert!(c.apply_vars(|k| (k == "TVC_BUDGET").then(|| "lots".to_string())).is_err());
        c.shard_count = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shard_ports_are_consecutive() {
        let c = ServerConfig::default();
        assert_eq!(c.shard_addr(3).port(), 7073);
        let c = ServerConfig { listen: "127.0.0.1:0".parse().unwrap(), ..Default::default() };
        assert_eq!(c.shard_addr(3).port(), 0);
    }
}
