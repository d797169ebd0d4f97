//! Run configuration, read from one TOML file.
//!
//! ```toml
//! seed = 7
//! cassette_dir = "cassettes"     # relative to the config file
//! parallelism = 4
//! # font_path = "fonts/Other.ttf"
//!
//! [llm]
//! mode = "remote"                # replay | remote | record
//! endpoint = "https://llm.example/v1/complete"
//! api_key_env = "VIMO_LLM_KEY"
//!
//! [str_predictor]
//! mode = "replay"
//!
//! [embedder]
//! mode = "histogram"             # histogram | remote
//!
//! [agent]
//! n = 3
//! iterations = 1
//!
//! [world_model]
//! filter_static_text = false
//! ```
//!
//! Only API keys come from the environment, through the variable each backend
//! names in `api_key_env`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig};
use crate::backend::{
    EmbeddingBackend, HistogramEmbedder, LlmBackend, RecordingLlm, RecordingStrPredictor, RemoteEmbedder, RemoteLlm,
    RemoteSettings, RemoteStrPredictor, ReplayLlm, ReplayStrPredictor, StrPredictor,
};
use crate::error::{Error, Result};
use crate::render::FontRenderer;
use crate::world_model::{WorldModel, WorldModelOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    /// Answer from the cassette directory only.
    Replay,
    /// Call the endpoint.
    Remote,
    /// Call the endpoint and store every answer in the cassette directory.
    Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: BackendMode,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout() -> u64 {
    300
}

fn default_retries() -> u32 {
    3
}

impl BackendConfig {
    pub fn replay() -> Self {
        BackendConfig {
            mode: BackendMode::Replay,
            endpoint: None,
            api_key_env: None,
            timeout_secs: default_timeout(),
            retries: default_retries(),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        match (self.mode, &self.endpoint) {
            (BackendMode::Replay, Some(_)) => Err(Error::InvalidInput(format!(
                "[{name}] replay mode takes no endpoint; use mode = \"record\" to call and store"
            ))),
            (BackendMode::Remote | BackendMode::Record, None) => {
                Err(Error::InvalidInput(format!("[{name}] needs an endpoint")))
            }
            (_, Some(e)) => check_url(name, e),
            _ => Ok(()),
        }
    }

    fn settings(&self, name: &str) -> Result<RemoteSettings> {
        let endpoint = self
            .endpoint
            .clone()
            .ok_or_else(|| Error::InvalidInput(format!("[{name}] needs an endpoint")))?;
        let mut s = RemoteSettings::new(endpoint);
        s.timeout = Duration::from_secs(self.timeout_secs);
        s.retries = self.retries;
        s.api_key = match &self.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(v),
                _ => {
                    log::warn!("[{name}] {var} is unset; calling without a key");
                    None
                }
            },
            None => None,
        };
        Ok(s)
    }
}

fn check_url(name: &str, endpoint: &str) -> Result<()> {
    let u = url::Url::parse(endpoint)
        .map_err(|e| Error::InvalidInput(format!("[{name}] endpoint {endpoint:?} is not a URL: {e}")))?;
    if !matches!(u.scheme(), "http" | "https") {
        return Err(Error::InvalidInput(format!("[{name}] endpoint must be http or https")));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    /// Offline colour-histogram embedding.
    #[default]
    Histogram,
    Remote {
        endpoint: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cassette_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub font_path: Option<PathBuf>,
    #[serde(default = "BackendConfig::replay")]
    pub llm: BackendConfig,
    #[serde(default = "BackendConfig::replay")]
    pub str_predictor: BackendConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub world_model: WorldModelOptions,
}

fn default_parallelism() -> usize {
    4
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            cassette_dir: None,
            parallelism: default_parallelism(),
            font_path: None,
            llm: BackendConfig::replay(),
            str_predictor: BackendConfig::replay(),
            embedder: EmbedderConfig::Histogram,
            agent: AgentConfig::default(),
            world_model: WorldModelOptions::default(),
        }
    }
}

impl Config {
    /// Parses and validates; relative paths stay relative.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::parse("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&q);
                }
            }
        };
        resolve(&mut cfg.cassette_dir);
        resolve(&mut cfg.font_path);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.llm.validate("llm")?;
        self.str_predictor.validate("str_predictor")?;
        if let EmbedderConfig::Remote { endpoint, .. } = &self.embedder {
            check_url("embedder", endpoint)?;
        }
        if self.parallelism == 0 {
            return Err(Error::InvalidInput("parallelism must be at least 1".into()));
        }
        if self.agent.n == 0 {
            return Err(Error::InvalidInput("[agent] n must be at least 1".into()));
        }
        if self.agent.iterations == 0 {
            return Err(Error::InvalidInput("[agent] iterations must be at least 1".into()));
        }
        let needs_cassettes = [self.llm.mode, self.str_predictor.mode]
            .iter()
            .any(|m| *m != BackendMode::Remote);
        if needs_cassettes && self.cassette_dir.is_none() {
            return Err(Error::InvalidInput(
                "cassette_dir is required when a backend replays or records".into(),
            ));
        }
        Ok(())
    }

    /// Switches every model backend to replay, dropping endpoints.
    pub fn force_replay(&mut self) -> Result<()> {
        for b in [&mut self.llm, &mut self.str_predictor] {
            b.mode = BackendMode::Replay;
            b.endpoint = None;
        }
        if matches!(self.embedder, EmbedderConfig::Remote { .. }) {
            log::warn!("replay: remote embedder replaced by the histogram embedder");
            self.embedder = EmbedderConfig::Histogram;
        }
        self.validate()
    }

    fn cassettes(&self) -> Result<&Path> {
        self.cassette_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("cassette_dir is not set".into()))
    }

    pub fn build_llm(&self) -> Result<Arc<dyn LlmBackend>> {
        Ok(match self.llm.mode {
            BackendMode::Replay => Arc::new(ReplayLlm::new(self.cassettes()?)),
            BackendMode::Remote => Arc::new(RemoteLlm::new(self.llm.settings("llm")?)?),
            BackendMode::Record => Arc::new(RecordingLlm::new(
                RemoteLlm::new(self.llm.settings("llm")?)?,
                self.cassettes()?,
            )),
        })
    }

    pub fn build_str_predictor(&self) -> Result<Arc<dyn StrPredictor>> {
        let name = "str_predictor";
        Ok(match self.str_predictor.mode {
            BackendMode::Replay => Arc::new(ReplayStrPredictor::new(self.cassettes()?)),
            BackendMode::Remote => Arc::new(RemoteStrPredictor::new(self.str_predictor.settings(name)?)?),
            BackendMode::Record => Arc::new(RecordingStrPredictor::new(
                RemoteStrPredictor::new(self.str_predictor.settings(name)?)?,
                self.cassettes()?,
            )),
        })
    }

    pub fn build_embedder(&self) -> Result<Arc<dyn EmbeddingBackend>> {
        Ok(match &self.embedder {
            EmbedderConfig::Histogram => Arc::new(HistogramEmbedder),
            EmbedderConfig::Remote {
                endpoint,
                api_key_env,
                timeout_secs,
                retries,
            } => {
                let b = BackendConfig {
                    mode: BackendMode::Remote,
                    endpoint: Some(endpoint.clone()),
                    api_key_env: api_key_env.clone(),
                    timeout_secs: *timeout_secs,
                    retries: *retries,
                };
                Arc::new(RemoteEmbedder::new(b.settings("embedder")?)?)
            }
        })
    }

    pub fn build_font(&self) -> Result<Arc<FontRenderer>> {
        Ok(match &self.font_path {
            Some(p) => FontRenderer::from_path(p)?.shared(),
            None => FontRenderer::bundled().shared(),
        })
    }

    pub fn build_world_model(&self) -> Result<WorldModel> {
        let mut wm = WorldModel::new(self.build_str_predictor()?, self.build_llm()?, self.build_font()?);
        wm.options = self.world_model;
        Ok(wm)
    }

    /// Agent config with the process-wide parallelism cap applied.
    pub fn agent_config(&self) -> AgentConfig {
        let mut a = self.agent.clone();
        a.parallelism = self.parallelism;
        a
    }

    pub fn build_agent(&self) -> Result<Agent> {
        Ok(Agent::new(self.build_world_model()?, self.build_llm()?, self.agent_config()))
    }
}
