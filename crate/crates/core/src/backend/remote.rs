//! HTTP client for the scoring wire protocol.
//!
//! `GET /v1/info` is used once as a handshake; every `score_window` call is a
//! single `POST /v1/score`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_response, BackendInfo, ScoringBackend, TokenScore, PROTOCOL_VERSION};
use crate::{BackendError, TokenId};

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub connect_timeout: Duration,
    pub request_timeout: Duration,
    /// Extra attempts after a failed transport round trip.
    pub retries: u32,
    /// Connection pool size, also the declared call parallelism.
    pub pool_size: usize,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(5),
            request_timeout: Duration::from_secs(120),
            retries: 2,
            pool_size: 8,
        }
    }
}

#[derive(Debug, Deserialize)]
pub(crate) struct InfoResponse {
    pub protocol_version: u32,
    pub model_id: String,
    pub vocab_size: u32,
    pub bos_id: Option<TokenId>,
    pub deterministic: bool,
    #[serde(default)]
    pub empty_context: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ScoreRequest {
    pub context: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    logprobs: Vec<f64>,
    argmax_ids: Vec<TokenId>,
    peak_mem_bytes: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct ErrorResponse {
    error: String,
    #[serde(default)]
    detail: String,
}

pub struct RemoteBackend {
    base: String,
    agent: ureq::Agent,
    options: RemoteOptions,
    info: BackendInfo,
    // 0 means nothing reported yet
    peak_mem: AtomicU64,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("base", &self.base)
            .field("info", &self.info)
            .finish()
    }
}

impl RemoteBackend {
    pub fn connect(endpoint: &str) -> Result<Self, BackendError> {
        Self::connect_with(endpoint, RemoteOptions::default())
    }

    pub fn connect_with(endpoint: &str, options: RemoteOptions) -> Result<Self, BackendError> {
        let base = endpoint.trim_end_matches('/').to_string();
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(options.connect_timeout)
            .timeout(options.request_timeout)
            .max_idle_connections_per_host(options.pool_size.max(1))
            .build();
        let url = format!("{base}/v1/info");
        let resp = agent
            .get(&url)
            .call()
            .map_err(|e| transport_error(&base, e, 1))?;
        let body = resp.into_string().map_err(|e| BackendError::Transport {
            endpoint: base.clone(),
            message: e.to_string(),
            attempts: 1,
            retryable: true,
        })?;
        let info: InfoResponse = serde_json::from_str(&body)
            .map_err(|e| BackendError::Handshake(format!("malformed /v1/info response: {e}")))?;
        if info.protocol_version != PROTOCOL_VERSION {
            return Err(BackendError::Handshake(format!(
                "server speaks protocol version {}, client speaks {PROTOCOL_VERSION}",
                info.protocol_version
            )));
        }
        let scores_empty_context = info.empty_context.unwrap_or(false) || info.bos_id.is_some();
        Ok(Self {
            base,
            agent,
            info: BackendInfo {
                model_id: info.model_id,
                vocab_size: info.vocab_size,
                bos_id: info.bos_id,
                deterministic: info.deterministic,
                scores_empty_context,
                reported_peak_mem_bytes: None,
            },
            options,
            peak_mem: AtomicU64::new(0),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn post_once(&self, body: &str, attempt: u32) -> Result<String, BackendError> {
        let url = format!("{}/v1/score", self.base);
        match self
            .agent
            .post(&url)
            .set("Content-Type", "application/json")
            .send_string(body)
        {
            Ok(resp) => resp.into_string().map_err(|e| BackendError::Transport {
                endpoint: self.base.clone(),
                message: e.to_string(),
                attempts: attempt,
                retryable: true,
            }),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                match serde_json::from_str::<ErrorResponse>(&text) {
                    Ok(err) if code == 400 => Err(BackendError::BadRequest(format!(
                        "{}: {}",
                        err.error, err.detail
                    ))),
                    _ => Err(BackendError::Transport {
                        endpoint: self.base.clone(),
                        message: format!("HTTP {code}: {text}"),
                        attempts: attempt,
                        retryable: code >= 500,
                    }),
                }
            }
            Err(e) => Err(transport_error(&self.base, e, attempt)),
        }
    }
}

fn transport_error(endpoint: &str, err: ureq::Error, attempts: u32) -> BackendError {
    BackendError::Transport {
        endpoint: endpoint.to_string(),
        message: err.to_string(),
        attempts,
        retryable: matches!(err, ureq::Error::Transport(_)),
    }
}

impl ScoringBackend for RemoteBackend {
    fn info(&self) -> BackendInfo {
        let mut info = self.info.clone();
        info.reported_peak_mem_bytes = match self.peak_mem.load(Ordering::Relaxed) {
            0 => None,
            n => Some(n),
        };
        info
    }

    fn max_parallelism(&self) -> Option<usize> {
        Some(self.options.pool_size.max(1))
    }

    fn score_window(
        &self,
        context: &[TokenId],
        targets: &[TokenId],
    ) -> Result<Vec<TokenScore>, BackendError> {
        let mut full_context = Vec::with_capacity(context.len() + 1);
        if let Some(bos) = self.info.bos_id {
            full_context.push(bos);
        }
        full_context.extend_from_slice(context);
        let body = serde_json::to_string(&ScoreRequest {
            context: full_context,
            targets: targets.to_vec(),
        })
        .expect("integer lists serialize");

        let mut attempt = 1;
        let text = loop {
            match self.post_once(&body, attempt) {
                Ok(text) => break text,
                Err(BackendError::Transport {
                    retryable: true, ..
                }) if attempt <= self.options.retries => {
                    log::warn!("score request to {} failed, retrying", self.base);
                    std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let resp: ScoreResponse = serde_json::from_str(&text).map_err(|e| {
            BackendError::ContractViolation(format!("malformed /v1/score response: {e}"))
        })?;
        if resp.logprobs.len() != resp.argmax_ids.len() {
            return Err(BackendError::ContractViolation(format!(
                "{} logprobs but {} argmax ids",
                resp.logprobs.len(),
                resp.argmax_ids.len()
            )));
        }
        if let Some(mem) = resp.peak_mem_bytes {
            self.peak_mem.fetch_max(mem, Ordering::Relaxed);
        }
        let scores: Vec<TokenScore> = resp
            .logprobs
            .into_iter()
            .zip(resp.argmax_ids)
            .map(|(logprob_nats, argmax_id)| TokenScore {
                logprob_nats,
                argmax_id,
            })
            .collect();
        check_response(targets, &scores)?;
        Ok(scores)
    }
}
