//! HTTP+JSON providers.
//!
//! Wire contract (all `POST`, bearer auth from the configured env var):
//!
//! | path        | request                                      | response              |
//! |-------------|----------------------------------------------|-----------------------|
//! | `/embed`    | `{"model", "inputs": [str]}`                 | `{"vectors": [[f64]]}`|
//! | `/rerank`   | `{"model", "query", "passages": [str]}`      | `{"scores": [f64]}`   |
//! | `/complete` | `{"model", "prompt", "temperature": 0}`      | `{"text": str}`       |
//!
//! Transport failures are retried with exponential backoff; HTTP status and
//! decoding errors are returned immediately so the model is never silently
//! resampled.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{CompletionModel, Embedder, ProviderConfig, ProviderError, Reranker};

const BACKOFF_BASE_MS: u64 = 200;

#[derive(Debug, Serialize, PartialEq)]
pub struct EmbedRequest<'a> {
    pub model: &'a str,
    pub inputs: &'a [String],
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct RerankRequest<'a> {
    pub model: &'a str,
    pub query: &'a str,
    pub passages: &'a [&'a str],
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RerankResponse {
    pub scores: Vec<f64>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct CompleteRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    /// Always 0.
    pub temperature: u8,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CompleteResponse {
    pub text: String,
}

/// Shared HTTP plumbing for the three remote providers.
#[derive(Debug, Clone)]
struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    auth_env: Option<String>,
    max_retries: u32,
}

impl HttpClient {
    fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        cfg.validate()?;
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(Duration::from_millis(cfg.timeout_ms))).build().into();
        Ok(Self {
            agent,
            endpoint: cfg.endpoint.clone().unwrap_or_default().trim_end_matches('/').to_string(),
            model: cfg.model.clone().unwrap_or_default(),
            auth_env: cfg.auth_env.clone(),
            max_retries: cfg.max_retries,
        })
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, ProviderError> {
        let url = format!("{}/{}", self.endpoint, path);
        let token = match &self.auth_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ProviderError::InvalidConfig(format!("auth env var {var} is not set")))?,
            ),
            None => None,
        };
        let mut attempt = 0;
        loop {
            let mut req = self.agent.post(&url);
            if let Some(t) = &token {
                req = req.header("Authorization", &format!("Bearer {t}"));
            }
            match req.send_json(body) {
                Ok(resp) => {
                    return resp.into_body().read_json::<R>().map_err(|e| ProviderError::BadResponse(e.to_string()));
                }
                Err(ureq::Error::StatusCode(status)) => return Err(ProviderError::Http { status }),
                Err(e @ ureq::Error::Json(_)) => return Err(ProviderError::BadResponse(e.to_string())),
                Err(e) if attempt < self.max_retries => {
                    let delay = BACKOFF_BASE_MS << attempt;
                    warn!(%url, attempt, delay_ms = delay, error = %e, "transport error, retrying");
                    thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => return Err(ProviderError::ProviderUnavailable(e.to_string())),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: HttpClient,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self { client: HttpClient::new(cfg)?, dim: cfg.dim })
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let resp: EmbedResponse = self.client.post("embed", &EmbedRequest { model: &self.client.model, inputs })?;
        Ok(resp.vectors.into_iter().map(|v| v.into_iter().map(|x| x as f32).collect()).collect())
    }
}

#[derive(Debug, Clone)]
pub struct RemoteReranker {
    client: HttpClient,
}

impl RemoteReranker {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self { client: HttpClient::new(cfg)? })
    }
}

impl Reranker for RemoteReranker {
    fn score(&self, query: &str, passages: &[&str]) -> Result<Vec<f64>, ProviderError> {
        let resp: RerankResponse =
            self.client.post("rerank", &RerankRequest { model: &self.client.model, query, passages })?;
        if resp.scores.len() != passages.len() {
            return Err(ProviderError::CountMismatch { expected: passages.len(), got: resp.scores.len() });
        }
        if resp.scores.iter().any(|s| !s.is_finite()) {
            return Err(ProviderError::NonFinite);
        }
        Ok(resp.scores)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteCompletion {
    client: HttpClient,
}

impl RemoteCompletion {
    pub fn new(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self { client: HttpClient::new(cfg)? })
    }
}

impl CompletionModel for RemoteCompletion {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let resp: CompleteResponse =
            self.client.post("complete", &CompleteRequest { model: &self.client.model, prompt, temperature: 0 })?;
        Ok(resp.text)
    }
}
