//! Service configuration file (TOML).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use ghostline_core::model::{ModelConfig, TemplateRules};
use ghostline_core::orchestrator::{Backend, EngineConfig};
use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_CORPUS;

pub const BIND_ENV: &str = "GHOSTLINE_BIND";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Template,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub backend: BackendKind,
    /// Weight seed of the reference backend.
    pub weight_seed: u64,
    pub sampling_seed: u64,
    pub temperature: f32,
    /// Directory for the fact store and trajectory log; in-memory when unset.
    pub data_dir: Option<PathBuf>,
    /// Newline-separated chat lines replacing the built-in corpus.
    pub corpus: Option<PathBuf>,
    pub styles: Vec<String>,
    pub debounce_ms: u64,
    /// Quiet time after which buffered traces are curated.
    pub idle_curation_ms: u64,
    /// Appends every inbound envelope to this file.
    pub record: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".parse().expect("valid address"),
            backend: BackendKind::Template,
            weight_seed: 7,
            sampling_seed: 0,
            temperature: 0.8,
            data_dir: None,
            corpus: None,
            styles: vec!["casual".into(), "playful".into(), "formal".into()],
            debounce_ms: 50,
            idle_curation_ms: 2000,
            record: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// File (when given), then the environment, then an explicit address.
    pub fn resolve(path: Option<&Path>, bind: Option<SocketAddr>) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Ok(addr) = std::env::var(BIND_ENV) {
            config.bind = addr.parse().with_context(|| format!("{BIND_ENV}={addr}"))?;
        }
        if let Some(addr) = bind {
            config.bind = addr;
        }
        Ok(config)
    }

    pub fn debounce(&self) -> Duration {
        Duration::from_millis(self.debounce_ms)
    }

    pub fn idle_curation(&self) -> Duration {
        Duration::from_millis(self.idle_curation_ms)
    }

    pub fn engine_config(&self) -> anyhow::Result<EngineConfig> {
        let backend = match self.backend {
            BackendKind::Reference => Backend::Reference(ModelConfig::tiny_with_controls(self.weight_seed)),
            BackendKind::Template => {
                let corpus = match &self.corpus {
                    Some(p) => std::fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(str::to_string)
                        .collect(),
                    None => DEFAULT_CORPUS.iter().map(|s| s.to_string()).collect(),
                };
                Backend::Template { corpus, rules: TemplateRules::standard() }
            }
        };
        let mut config = EngineConfig::new(backend);
        anyhow::ensure!(!self.styles.is_empty(), "at least one style is required");
        config.default_style = self.styles[0].clone();
        config.styles = self.styles.clone();
        config.sampling.seed = self.sampling_seed;
        config.sampling.temperature = self.temperature;
        config.data_dir = self.data_dir.clone();
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: ServiceConfig = toml::from_str("bind = \"127.0.0.1:9000\"\nbackend = \"reference\"").unwrap();
        assert_eq!(c.bind.port(), 9000);
        assert_eq!(c.backend, BackendKind::Reference);
        assert_eq!(c.debounce_ms, 50);
        assert!(toml::from_str::<ServiceConfig>("bnd = 1").is_err());
    }

    #[test]
    fn explicit_bind_wins() {
        let addr: SocketAddr = "127.0.0.1:1".parse().unwrap();
        assert_eq!(ServiceConfig::resolve(None, Some(addr)).unwrap().bind, addr);
    }
}
