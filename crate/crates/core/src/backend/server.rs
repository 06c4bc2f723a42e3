//! HTTP service exposing a Markov model over the scoring wire protocol.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use super::remote::ScoreRequest;
use super::{MarkovBackend, ScoringBackend, PROTOCOL_VERSION};
use crate::markov::MarkovModel;
use crate::sysmetrics::peak_rss;
use crate::{BackendError, Error, Result, TokenId};

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub workers: usize,
    pub model_id: Option<String>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            model_id: None,
        }
    }
}

/// A running server. Dropping the handle does not stop it; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server stops.
    pub fn wait(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }

    pub fn shutdown(self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        self.wait();
    }
}

#[derive(Serialize)]
struct InfoBody<'a> {
    protocol_version: u32,
    model_id: &'a str,
    vocab_size: u32,
    bos_id: Option<TokenId>,
    deterministic: bool,
    empty_context: bool,
}

#[derive(Serialize)]
struct ScoreBody {
    #[serde(serialize_with = "crate::numfmt::serialize_vec")]
    logprobs: Vec<f64>,
    argmax_ids: Vec<TokenId>,
    peak_mem_bytes: Option<u64>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    detail: String,
}

pub fn serve(model: Arc<MarkovModel>, bind: &str) -> Result<ServerHandle> {
    serve_with(model, bind, ServerOptions::default())
}

pub fn serve_with(
    model: Arc<MarkovModel>,
    bind: &str,
    options: ServerOptions,
) -> Result<ServerHandle> {
    let server =
        Server::http(bind).map_err(|e| Error::config(format!("cannot bind {bind}: {e}")))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::config(format!("{bind} is not an IP address")))?;
    let server = Arc::new(server);
    let mut backend = MarkovBackend::new(model);
    if let Some(id) = options.model_id {
        backend = backend.with_model_id(id);
    }
    let backend = Arc::new(backend);
    let workers = (0..options.workers.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let backend = Arc::clone(&backend);
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    handle(&backend, req);
                }
            })
        })
        .collect();
    log::info!("serving {} on http://{addr}", backend.info().model_id);
    Ok(ServerHandle {
        addr,
        server,
        workers,
    })
}

fn json_response(status: u16, body: String) -> Response<std::io::Cursor<Vec<u8>>> {
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    Response::from_string(body)
        .with_status_code(status)
        .with_header(header)
}

fn bad_request(detail: String) -> (u16, String) {
    let body = serde_json::to_string(&ErrorBody {
        error: "bad_request",
        detail,
    })
    .expect("error body serializes");
    (400, body)
}

fn handle(backend: &MarkovBackend, mut req: Request) {
    let (status, body) = match (req.method(), req.url()) {
        (Method::Get, "/v1/info") => {
            let info = backend.info();
            let body = InfoBody {
                protocol_version: PROTOCOL_VERSION,
                model_id: &info.model_id,
                vocab_size: info.vocab_size,
                bos_id: info.bos_id,
                deterministic: info.deterministic,
                empty_context: info.scores_empty_context,
            };
            (200, serde_json::to_string(&body).expect("info serializes"))
        }
        (Method::Post, "/v1/score") => {
            let mut text = String::new();
            match req.as_reader().read_to_string(&mut text) {
                Ok(_) => score(backend, &text),
                Err(e) => bad_request(format!("unreadable body: {e}")),
            }
        }
        _ => (
            404,
            serde_json::to_string(&ErrorBody {
                error: "not_found",
                detail: format!("{} {}", req.method(), req.url()),
            })
            .expect("error body serializes"),
        ),
    };
    if let Err(e) = req.respond(json_response(status, body)) {
        log::warn!("failed to send response: {e}");
    }
}

fn score(backend: &MarkovBackend, text: &str) -> (u16, String) {
    let request: ScoreRequest = match serde_json::from_str(text) {
        Ok(r) => r,
        Err(e) => return bad_request(format!("malformed request: {e}")),
    };
    match backend.score_window(&request.context, &request.targets) {
        Ok(scores) => {
            let body = ScoreBody {
                logprobs: scores.iter().map(|s| s.logprob_nats).collect(),
                argmax_ids: scores.iter().map(|s| s.argmax_id).collect(),
                peak_mem_bytes: peak_rss(),
            };
            (
                200,
                serde_json::to_string(&body).expect("finite logprobs serialize"),
            )
        }
        Err(BackendError::BadRequest(detail)) => bad_request(detail),
        Err(e) => (
            500,
            serde_json::to_string(&ErrorBody {
                error: "internal",
                detail: e.to_string(),
            })
            .expect("error body serializes"),
        ),
    }
}
