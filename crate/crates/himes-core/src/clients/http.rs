//! JSON-over-HTTP client implementations.
//!
//! Wire contract: chat endpoints accept `POST {"prompt": ...}` and return
//! `{"text": ...}`; embedder endpoints accept `POST {"texts": [...]}` and
//! return `{"vectors": [[...], ...]}`. Calls are synchronous with bounded
//! retries and exponential backoff; timeouts and 5xx responses are retryable,
//! 4xx responses are not.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clients::{ChatClient, ClassifierClient, EmbedderClient};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct HttpClientConfig {
    /// Full URL the request is POSTed to.
    pub endpoint: String,
    /// Optional static bearer token.
    pub auth_token: Option<String>,
    pub timeout: Duration,
    /// Additional attempts after the first failure.
    pub max_retries: u32,
}

impl HttpClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpClientConfig {
            endpoint: endpoint.into(),
            auth_token: None,
            timeout: Duration::from_secs(30),
            max_retries: 3,
        }
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    text: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

fn build_client(config: &HttpClientConfig) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(config.timeout)
        .build()
        .map_err(|e| Error::Transport {
            message: format!("building http client: {e}"),
            retryable: false,
        })
}

/// POSTs `body` to the configured endpoint, retrying transient failures with
/// exponential backoff, and deserializes the JSON response.
fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
    client: &reqwest::blocking::Client,
    config: &HttpClientConfig,
    body: &B,
) -> Result<R> {
    let mut backoff = Duration::from_millis(100);
    let mut last_error = None;
    for attempt in 0..=config.max_retries {
        if attempt > 0 {
            std::thread::sleep(backoff);
            backoff *= 2;
        }
        let mut request = client.post(&config.endpoint).json(body);
        if let Some(token) = &config.auth_token {
            request = request.bearer_auth(token);
        }
        match request.send() {
            Ok(response) => {
                let status = response.status();
                if status.is_success() {
                    return response.json::<R>().map_err(|e| Error::MalformedReply(e.to_string()));
                }
                let error = Error::Transport {
                    message: format!("{} returned {status}", config.endpoint),
                    retryable: status.is_server_error(),
                };
                if !error.is_retryable() {
                    return Err(error);
                }
                last_error = Some(error);
            }
            Err(e) => {
                last_error = Some(Error::Transport {
                    message: format!("{}: {e}", config.endpoint),
                    retryable: e.is_timeout() || e.is_connect() || e.is_request(),
                });
            }
        }
    }
    Err(last_error.unwrap_or(Error::Transport {
        message: "request never attempted".into(),
        retryable: false,
    }))
}

pub struct HttpChatClient {
    config: HttpClientConfig,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(config: HttpClientConfig, model: impl Into<String>) -> Result<Self> {
        let client = build_client(&config)?;
        Ok(HttpChatClient {
            config,
            model: model.into(),
            client,
        })
    }
}

impl ChatClient for HttpChatClient {
    fn generate(&self, prompt: &str) -> Result<String> {
        let response: ChatResponse = post_json(&self.client, &self.config, &ChatRequest { prompt })?;
        Ok(response.text)
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}

pub struct HttpEmbedderClient {
    config: HttpClientConfig,
    model: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedderClient {
    pub fn new(config: HttpClientConfig, model: impl Into<String>, dim: usize) -> Result<Self> {
        let client = build_client(&config)?;
        Ok(HttpEmbedderClient {
            config,
            model: model.into(),
            dim,
            client,
        })
    }

    fn to_vectors(&self, response: EmbedResponse, expected: usize) -> Result<Vec<EmbeddingVector>> {
        if response.vectors.len() != expected {
            return Err(Error::MalformedReply(format!(
                "asked for {expected} embeddings, got {}",
                response.vectors.len()
            )));
        }
        response
            .vectors
            .into_iter()
            .map(|values| {
                if values.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        left: values.len(),
                        right: self.dim,
                    });
                }
                // Upstream models are expected to return unit vectors, but
                // renormalizing costs little and removes drift.
                EmbeddingVector::normalized(values)
            })
            .collect()
    }
}

impl EmbedderClient for HttpEmbedderClient {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut vectors = self.embed_batch(std::slice::from_ref(&text.to_string()))?;
        Ok(vectors.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let response: EmbedResponse = post_json(&self.client, &self.config, &EmbedRequest { texts })?;
        self.to_vectors(response, texts.len())
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        format!("{}-{}", self.model, self.dim)
    }
}

/// Classifier backed by a chat endpoint: prompts for a JSON
/// `{"topic": ..., "subtopic": ...}` label.
pub struct ChatClassifier<C: ChatClient> {
    chat: C,
    taxonomy_listing: String,
}

impl<C: ChatClient> ChatClassifier<C> {
    pub fn new(chat: C, taxonomy: &crate::taxonomy::TopicTaxonomy) -> Self {
        let listing = taxonomy
            .categories()
            .iter()
            .map(|c| format!("- {}: {}", c.name, c.subtopics.join(", ")))
            .collect::<Vec<_>>()
            .join("\n");
        ChatClassifier {
            chat,
            taxonomy_listing: listing,
        }
    }
}

#[derive(Deserialize)]
struct ClassifierReply {
    topic: String,
    subtopic: String,
}

impl<C: ChatClient> ClassifierClient for ChatClassifier<C> {
    fn classify(&self, query: &str) -> Result<(String, String)> {
        let prompt = crate::prompts::render_classifier_prompt(query, &self.taxonomy_listing)?;
        let reply = self.chat.generate(&prompt)?;
        let parsed: ClassifierReply = crate::prompts::parse_json_reply(&reply)?;
        Ok((parsed.topic, parsed.subtopic))
    }
}
