//! Service configuration with the documented precedence: CLI flags override
//! environment variables (prefix `HIMES_`), which override the TOML config
//! file, which overrides built-in defaults.

use std::path::PathBuf;

use serde::Deserialize;

use himes_core::pipeline::PipelineConfig;
use himes_core::Result;

pub const ENV_PREFIX: &str = "HIMES_";

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub listen: Option<String>,
    pub store_dir: Option<PathBuf>,
    pub kb_path: Option<PathBuf>,
    pub taxonomy_path: Option<PathBuf>,
    pub auth_token: Option<String>,
    #[serde(default)]
    pub clients: ClientsFileConfig,
    pub pipeline: Option<PipelineConfig>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ClientsFileConfig {
    pub mode: Option<String>,
    pub chat_endpoint: Option<String>,
    pub rewrite_endpoint: Option<String>,
    pub embed_endpoint: Option<String>,
    pub embed_dim: Option<usize>,
    pub auth_token: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
}

/// Fully resolved service configuration.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: String,
    pub store_dir: PathBuf,
    pub kb_path: Option<PathBuf>,
    pub taxonomy_path: Option<PathBuf>,
    pub auth_token: Option<String>,
    pub clients: ClientsConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone)]
pub struct ClientsConfig {
    pub mode: ClientMode,
    pub chat_endpoint: Option<String>,
    pub rewrite_endpoint: Option<String>,
    pub embed_endpoint: Option<String>,
    pub embed_dim: usize,
    pub auth_token: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientMode {
    Stub,
    Http,
}

impl std::str::FromStr for ClientMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "stub" => Ok(ClientMode::Stub),
            "http" => Ok(ClientMode::Http),
            other => Err(format!("unknown client mode '{other}' (stub|http)")),
        }
    }
}

fn env_var(key: &str) -> Option<String> {
    std::env::var(format!("{ENV_PREFIX}{key}")).ok().filter(|v| !v.is_empty())
}

/// Flag-level overrides collected by the CLI layer.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub listen: Option<String>,
    pub store_dir: Option<PathBuf>,
    pub kb_path: Option<PathBuf>,
    pub taxonomy_path: Option<PathBuf>,
    pub auth_token: Option<String>,
    pub client_mode: Option<ClientMode>,
    pub chat_endpoint: Option<String>,
    pub embed_endpoint: Option<String>,
    pub embed_dim: Option<usize>,
}

impl ServiceConfig {
    /// Resolves the final configuration from an optional config file, the
    /// environment, and CLI overrides.
    pub fn resolve(file: Option<&std::path::Path>, flags: &Overrides) -> Result<Self> {
        let file_config: FileConfig = match file {
            Some(path) => {
                let content = std::fs::read_to_string(path)?;
                toml::from_str(&content).map_err(|e| {
                    himes_core::Error::InvalidConfig(format!("{}: {e}", path.display()))
                })?
            }
            None => FileConfig::default(),
        };

        let mode = flags
            .client_mode
            .or_else(|| env_var("CLIENT_MODE").and_then(|v| v.parse().ok()))
            .or_else(|| file_config.clients.mode.as_deref().and_then(|v| v.parse().ok()))
            .unwrap_or(ClientMode::Stub);

        let clients = ClientsConfig {
            mode,
            chat_endpoint: flags
                .chat_endpoint
                .clone()
                .or_else(|| env_var("CHAT_ENDPOINT"))
                .or(file_config.clients.chat_endpoint),
            rewrite_endpoint: env_var("REWRITE_ENDPOINT").or(file_config.clients.rewrite_endpoint),
            embed_endpoint: flags
                .embed_endpoint
                .clone()
                .or_else(|| env_var("EMBED_ENDPOINT"))
                .or(file_config.clients.embed_endpoint),
            embed_dim: flags
                .embed_dim
                .or_else(|| env_var("EMBED_DIM").and_then(|v| v.parse().ok()))
                .or(file_config.clients.embed_dim)
                .unwrap_or(256),
            auth_token: env_var("CLIENT_AUTH_TOKEN").or(file_config.clients.auth_token),
            timeout_secs: env_var("TIMEOUT_SECS")
                .and_then(|v| v.parse().ok())
                .or(file_config.clients.timeout_secs)
                .unwrap_or(30),
            max_retries: file_config.clients.max_retries.unwrap_or(3),
        };

        Ok(ServiceConfig {
            listen: flags
                .listen
                .clone()
                .or_else(|| env_var("LISTEN"))
                .or(file_config.listen)
                .unwrap_or_else(|| "127.0.0.1:8080".to_string()),
            store_dir: flags
                .store_dir
                .clone()
                .or_else(|| env_var("STORE_DIR").map(PathBuf::from))
                .or(file_config.store_dir)
                .unwrap_or_else(|| PathBuf::from("./himes-store")),
            kb_path: flags
                .kb_path
                .clone()
                .or_else(|| env_var("KB_PATH").map(PathBuf::from))
                .or(file_config.kb_path),
            taxonomy_path: flags
                .taxonomy_path
                .clone()
                .or_else(|| env_var("TAXONOMY_PATH").map(PathBuf::from))
                .or(file_config.taxonomy_path),
            auth_token: flags
                .auth_token
                .clone()
                .or_else(|| env_var("AUTH_TOKEN"))
                .or(file_config.auth_token),
            clients,
            pipeline: file_config.pipeline.unwrap_or_default(),
        })
    }
}
