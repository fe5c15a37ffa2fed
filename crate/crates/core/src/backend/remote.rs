use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use tracing::{debug, warn};

use super::{wire, BackendConfig, ChatBackend, ChatMessage, Completion};
use crate::error::{Error, Result};

/// Counting gate bounding concurrent requests.
struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    fn new(n: usize) -> Self {
        InFlight {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(Error),
}

/// HTTP chat-completion client with exponential backoff on transient failures.
pub struct RemoteBackend {
    config: BackendConfig,
    api_key: Option<String>,
    client: Client,
    gate: InFlight,
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let gate = InFlight::new(config.max_in_flight);
        Ok(RemoteBackend {
            config,
            api_key,
            client,
            gate,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.backoff_base_ms as f64 * 2f64.powi(attempt as i32);
        let jitter = rand::rng().random_range(0.0..0.25);
        Duration::from_millis((base * (1.0 + jitter)) as u64)
    }

    fn attempt(&self, body: &serde_json::Value) -> Attempt {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("request failed: {e}")),
        };
        let status = resp.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            let text = resp.text().unwrap_or_default();
            return Attempt::Fatal(Error::Auth(format!("{status}: {text:.200}")));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Attempt::Retry(format!("http {status}"));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Attempt::Fatal(Error::Protocol(format!("http {status}: {text:.200}")));
        }
        let value: serde_json::Value = match resp.json() {
            Ok(v) => v,
            Err(e) => return Attempt::Fatal(Error::Protocol(format!("response is not json: {e}"))),
        };
        match wire::parse_response(&value) {
            Ok(t) => Attempt::Done(t),
            Err(e) => Attempt::Fatal(e),
        }
    }
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion> {
        if messages.is_empty() {
            return Err(Error::Protocol("empty message list".into()));
        }
        let body = wire::request_body(&self.config, messages);
        let _slot = self.gate.acquire();
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(Completion { text, retries }),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(reason) => {
                    if retries >= self.config.max_retries {
                        warn!(retries, %reason, "giving up");
                        return Err(Error::Transport(format!(
                            "{reason} (after {retries} retries)"
                        )));
                    }
                    let wait = self.backoff(retries);
                    debug!(attempt = retries + 1, ?wait, %reason, "retrying");
                    thread::sleep(wait);
                    retries += 1;
                }
            }
        }
    }
}
