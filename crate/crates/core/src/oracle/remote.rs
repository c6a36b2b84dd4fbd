use std::thread;
use std::time::Duration;

use super::{validate_response, ModelMeta, OracleError, ValueOracle, ValueRequest, ValueResponse};

/// Environment variable holding a bearer token for the remote oracle.
pub const AUTH_TOKEN_ENV: &str = "SYNTAXSHAP_ORACLE_TOKEN";

const EXCERPT_LEN: usize = 200;

/// Client for a model served over the JSON scoring protocol
/// (`POST /v1/score`, `GET /v1/meta`).
pub struct RemoteOracle {
    base: String,
    agent: ureq::Agent,
    retries: u32,
    auth: Option<String>,
    meta: ModelMeta,
}

/// Connects to `endpoint` and performs the metadata handshake.
pub fn remote_oracle(endpoint: &str, timeout: Duration, retries: u32) -> Result<RemoteOracle, OracleError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let mut oracle = RemoteOracle {
        base: endpoint.trim_end_matches('/').to_string(),
        agent,
        retries,
        auth: std::env::var(AUTH_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        meta: ModelMeta { model: String::new(), vocab_size: 0, max_tokens: 0 },
    };
    let body = oracle.call("GET", "/v1/meta", None)?;
    oracle.meta = serde_json::from_str(&body).map_err(|e| protocol(format!("bad meta: {e}"), &body))?;
    if oracle.meta.vocab_size == 0 {
        return Err(protocol("vocab_size must be positive".into(), &body));
    }
    Ok(oracle)
}

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT_LEN).collect()
}

fn protocol(message: String, body: &str) -> OracleError {
    OracleError::Protocol { message, excerpt: excerpt(body) }
}

impl RemoteOracle {
    pub fn endpoint(&self) -> &str {
        &self.base
    }

    /// Sends one request, retrying transport failures, 429 and 5xx with
    /// exponential backoff. Returns the body of a 2xx response.
    fn call(&self, method: &str, path: &str, body: Option<&str>) -> Result<String, OracleError> {
        let url = format!("{}{}", self.base, path);
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(50 << (attempt - 1).min(6)));
            }
            let result = match body {
                Some(b) => {
                    let mut req = self.agent.post(&url).header("Content-Type", "application/json");
                    if let Some(token) = &self.auth {
                        req = req.header("Authorization", format!("Bearer {token}"));
                    }
                    req.send(b)
                }
                None => {
                    let mut req = self.agent.get(&url);
                    if let Some(token) = &self.auth {
                        req = req.header("Authorization", format!("Bearer {token}"));
                    }
                    req.call()
                }
            };
            let mut response = match result {
                Ok(r) => r,
                Err(e) => {
                    last = format!("{method} {url}: {e}");
                    continue;
                }
            };
            let status = response.status().as_u16();
            let text = match response.body_mut().read_to_string() {
                Ok(t) => t,
                Err(e) => {
                    last = format!("{method} {url}: reading body: {e}");
                    continue;
                }
            };
            match status {
                200..=299 => return Ok(text),
                429 | 500..=599 => last = format!("{method} {url}: HTTP {status}"),
                _ => return Err(protocol(format!("{method} {url}: HTTP {status}"), &text)),
            }
        }
        Err(OracleError::Transport(format!("{last} (after {} attempts)", self.retries + 1)))
    }
}

impl ValueOracle for RemoteOracle {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError> {
        request.validate()?;
        let payload = serde_json::to_string(request).map_err(|e| OracleError::InvalidRequest(e.to_string()))?;
        let body = self.call("POST", "/v1/score", Some(&payload))?;
        let response: ValueResponse =
            serde_json::from_str(&body).map_err(|e| protocol(format!("bad score response: {e}"), &body))?;
        validate_response(request, &response).map_err(|m| protocol(m, &body))?;
        Ok(response)
    }

    fn meta(&self) -> ModelMeta {
        self.meta.clone()
    }
}
