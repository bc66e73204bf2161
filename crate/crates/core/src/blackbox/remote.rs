use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::http::Uri;
use ureq::Agent;

use super::server::{GenerateRequest, GenerateResponse, LogprobsRequest, LogprobsResponse};
use super::Endpoint;
use crate::error::{Error, Result};

const EXCERPT_LEN: usize = 200;

/// Client settings for a wire-protocol endpoint.
#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Minimum spacing between consecutive requests.
    pub min_interval: Duration,
    /// First retry delay; doubles on every further retry.
    pub backoff: Duration,
    pub bearer_token: Option<String>,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            min_interval: Duration::ZERO,
            backoff: Duration::from_millis(500),
            bearer_token: None,
        }
    }
}

#[derive(Debug)]
struct RateLimiter {
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn wait(&self) {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let ready = prev + self.min_interval;
            let now = Instant::now();
            if ready > now {
                thread::sleep(ready - now);
            }
        }
        *last = Some(Instant::now());
    }
}

/// HTTP client for `POST /generate` and `POST /logprobs`.
#[derive(Debug)]
pub struct RemoteEndpoint {
    config: RemoteConfig,
    base: String,
    agent: Agent,
    limiter: RateLimiter,
    queries: u64,
}

/// Validates the URL and builds a client. No request is sent.
pub fn remote_connect(config: RemoteConfig) -> Result<RemoteEndpoint> {
    RemoteEndpoint::new(config)
}

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT_LEN).collect()
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl RemoteEndpoint {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let uri: Uri = config
            .base_url
            .parse()
            .map_err(|e| Error::InvalidParameter(format!("bad endpoint URL {:?}: {e}", config.base_url)))?;
        match uri.scheme_str() {
            Some("http") | Some("https") if uri.host().is_some() => {}
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "endpoint URL {:?} must be absolute http(s)",
                    config.base_url
                )))
            }
        }
        let agent: Agent =
            Agent::config_builder().timeout_global(Some(config.timeout)).http_status_as_error(false).build().into();
        Ok(Self {
            base: config.base_url.trim_end_matches('/').to_string(),
            limiter: RateLimiter { min_interval: config.min_interval, last: Mutex::new(None) },
            agent,
            config,
            queries: 0,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, url: &str, body: &str) -> std::result::Result<String, Attempt> {
        self.limiter.wait();
        let mut req = self.agent.post(url).header("Accept", "application/json");
        if let Some(token) = &self.config.bearer_token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.content_type("application/json").send(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        match status {
            200 => Ok(text),
            429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}: {}", error_message(&text)))),
            _ => Err(Attempt::Fatal(Error::HttpStatus { status, message: error_message(&text) })),
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, request: &Req) -> Result<Resp> {
        let url = format!("{}{path}", self.base);
        let body = serde_json::to_string(request)?;
        let mut trace = Vec::new();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&url, &body) {
                Ok(text) => {
                    return serde_json::from_str(&text).map_err(|e| Error::Protocol {
                        message: format!("malformed response from {path}: {e}"),
                        excerpt: excerpt(&text),
                    })
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("{url} attempt {attempts} failed: {msg}");
                    trace.push(format!("attempt {attempts}: {msg}"));
                    if attempts > self.config.max_retries {
                        return Err(Error::Transport { attempts, message: msg, trace });
                    }
                    thread::sleep(self.config.backoff * 2u32.saturating_pow(attempts - 1));
                }
            }
        }
    }

    /// Next-token probabilities from `/logprobs`, optionally restricted to `candidates`.
    pub fn logprobs(&self, prompt: &str, candidates: Option<&[String]>) -> Result<Vec<(String, f64)>> {
        let request = LogprobsRequest { prompt: prompt.to_string(), candidates: candidates.map(<[String]>::to_vec) };
        let resp: LogprobsResponse = self.post("/logprobs", &request)?;
        let total: f64 = resp.probs.iter().map(|(_, p)| p).sum();
        if resp.probs.iter().any(|(_, p)| !(p.is_finite() && *p >= 0.0)) || total > 1.0 + 1e-6 {
            return Err(Error::Protocol {
                message: format!("/logprobs returned invalid probabilities (sum {total})"),
                excerpt: String::new(),
            });
        }
        Ok(resp.probs)
    }
}

fn error_message(text: &str) -> String {
    serde_json::from_str::<serde_json::Value>(text)
        .ok()
        .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
        .unwrap_or_else(|| excerpt(text))
}

impl Endpoint for RemoteEndpoint {
    fn generate(&mut self, prompt: &str) -> Result<String> {
        let mut out = self.generate_batch(prompt, 1)?;
        Ok(out.pop().expect("one response"))
    }

    fn generate_batch(&mut self, prompt: &str, n: usize) -> Result<Vec<String>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let resp: GenerateResponse = self.post("/generate", &GenerateRequest { prompt: prompt.to_string(), n })?;
        if resp.tokens.len() != n {
            return Err(Error::Protocol {
                message: format!("asked for {n} tokens, got {}", resp.tokens.len()),
                excerpt: String::new(),
            });
        }
        self.queries += n as u64;
        Ok(resp.tokens)
    }

    fn queries(&self) -> u64 {
        self.queries
    }
}
