use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use figment::providers::{Env, Format, Json, Serialized, Toml};
use figment::Figment;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use monitorvlm_core::clause_filter::TrainConfig;
use monitorvlm_core::pipeline::PipelineConfig;
use monitorvlm_server::ApiConfig;

use crate::error::CliError;

pub const ENV_PREFIX: &str = "MONITORVLM_";

/// The full key-tree. Sources are layered as defaults < config file <
/// `MONITORVLM_*` environment variables < command line flags. Nested keys
/// in the environment use a double underscore, e.g. `MONITORVLM_PIPELINE__TOP_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub seed: u64,
    pub data_dir: PathBuf,
    /// Clause registry file; overrides `pipeline.registry`.
    pub registry: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub train: TrainSettings,
    pub server: ServerSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            data_dir: PathBuf::from("data"),
            registry: None,
            pipeline: PipelineConfig::default(),
            train: TrainSettings::default(),
            server: ServerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            lr: t.lr,
            epochs: t.epochs,
            batch: t.batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerSettings {
    pub bind: SocketAddr,
    pub max_upload_bytes: u64,
    pub auth_token: Option<String>,
    pub max_jobs: usize,
    pub cors_origins: Vec<String>,
}

impl Default for ServerSettings {
    fn default() -> Self {
        let api = ApiConfig::default();
        ServerSettings {
            bind: api.bind,
            max_upload_bytes: api.max_upload_bytes,
            auth_token: api.auth_token,
            max_jobs: api.max_jobs,
            cors_origins: api.cors_origins,
        }
    }
}

impl Settings {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch: self.train.batch,
            seed: self.seed,
        }
    }

    pub fn api_config(&self) -> ApiConfig {
        ApiConfig {
            bind: self.server.bind,
            max_upload_bytes: self.server.max_upload_bytes,
            data_dir: self.data_dir.clone(),
            pipeline: self.pipeline.clone(),
            auth_token: self.server.auth_token.clone(),
            max_jobs: self.server.max_jobs,
            cors_origins: self.server.cors_origins.clone(),
        }
    }
}

/// Values given on the command line, keyed by dotted path.
#[derive(Debug, Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set(&mut self, dotted: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).expect("flag values serialize");
        let mut parts: Vec<&str> = dotted.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut node = &mut self.0;
        for part in parts {
            node = node
                .entry(part)
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("override paths do not collide");
        }
        node.insert(last.to_string(), value);
    }

    pub fn set_opt<T: Serialize>(&mut self, dotted: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(dotted, v);
        }
    }
}

pub fn load(config_file: Option<&Path>, overrides: Overrides) -> Result<Settings, CliError> {
    let mut figment = Figment::from(Serialized::defaults(Settings::default()));
    if let Some(path) = config_file {
        if !path.is_file() {
            return Err(CliError::Usage(format!("config file {} does not exist", path.display())));
        }
        figment = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => figment.merge(Json::file_exact(path)),
            Some("toml") => figment.merge(Toml::file_exact(path)),
            _ => {
                return Err(CliError::Usage(format!(
                    "config file {} must end in .toml or .json",
                    path.display()
                )))
            }
        };
    }
    let figment = figment
        .merge(Env::prefixed(ENV_PREFIX).split("__"))
        .merge(Serialized::defaults(Value::Object(overrides.0)));
    let mut settings: Settings = figment.extract().map_err(Box::new)?;
    if let Some(registry) = &settings.registry {
        settings.pipeline.registry = Some(registry.clone());
    }
    settings.pipeline.validate_values()?;
    Ok(settings)
}
