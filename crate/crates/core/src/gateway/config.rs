use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::router::GenerationParams;
use crate::error::{Error, Result};

/// What to do when an expert cannot be reached.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPolicy {
    /// Record the failure in the trace and answer from the base model.
    #[default]
    Fallback,
    /// Fail the request.
    Strict,
}

impl std::str::FromStr for ErrorPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fallback" => Ok(ErrorPolicy::Fallback),
            "strict" => Ok(ErrorPolicy::Strict),
            other => Err(Error::invalid(format!("unknown error policy `{other}`"))),
        }
    }
}

/// Gateway service configuration (TOML).
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// registry = "registry.json"
/// timeout_ms = 30000
/// error_policy = "fallback"
/// max_tokens = 512
/// stop_on_negative = true
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub registry: PathBuf,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub error_policy: ErrorPolicy,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_true")]
    pub stop_on_negative: bool,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_tokens() -> u32 {
    512
}

fn default_true() -> bool {
    true
}

impl GatewayConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: GatewayConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.registry.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.registry = dir.join(&cfg.registry);
            }
        }
        Ok(cfg)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn generation(&self) -> GenerationParams {
        GenerationParams {
            max_tokens: self.max_tokens,
            stop_on_negative: self.stop_on_negative,
            error_policy: self.error_policy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gw.toml");
        std::fs::write(&path, "listen = \"127.0.0.1:8080\"\nregistry = \"reg.json\"\nerror_policy = \"strict\"\n").unwrap();
        let cfg = GatewayConfig::load(&path).unwrap();
        assert_eq!(cfg.registry, dir.path().join("reg.json"));
        assert_eq!(cfg.timeout(), Duration::from_secs(30));
        assert_eq!(cfg.generation().error_policy, ErrorPolicy::Strict);
        assert!(cfg.stop_on_negative);
    }

    #[test]
    fn rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gw.toml");
        std::fs::write(&path, "listen = \"127.0.0.1:8080\"\nregistry = \"r\"\nparallel = true\n").unwrap();
        assert!(matches!(GatewayConfig::load(&path), Err(Error::Config(_))));
    }
}
