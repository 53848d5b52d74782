//! HTTP approval and audit API.
//!
//! Read-only over the log. The only write is a decision on a pending
//! request, which lands in the gate through the webhook broker's queue.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};

use crate::audit::{AuditLog, ChainVerdict};
use crate::canonical::parse_strict;
use crate::gate::{Decision, PendingQueue, QueueError};
use crate::hash::RequestId;

pub const TOKEN_HEADER: &str = "X-Skillgate-Token";

/// Every route the service answers, as (method, path pattern).
pub const ENDPOINTS: [(&str, &str); 4] = [
    ("GET", "/v1/pending"),
    ("POST", "/v1/decisions/{requestId}"),
    ("GET", "/v1/audit"),
    ("GET", "/v1/health"),
];

#[derive(Clone)]
pub struct ApiState {
    pub queue: Arc<PendingQueue>,
    pub audit: AuditLog,
    /// When set, every request must carry it in [`TOKEN_HEADER`].
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

fn reply(status: u16, body: Value) -> ApiResponse {
    ApiResponse { status, body }
}

fn error(status: u16, message: impl Into<String>) -> ApiResponse {
    reply(status, json!({"error": message.into()}))
}

fn query_param<'a>(query: &'a str, key: &str) -> Option<&'a str> {
    query.split('&').find_map(|kv| {
        let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
        (k == key).then_some(v)
    })
}

/// Routes one request. Transport-independent so it can be tested directly.
pub fn handle(state: &ApiState, method: &str, url: &str, token: Option<&str>, body: &[u8]) -> ApiResponse {
    if let Some(expected) = &state.token {
        if token != Some(expected.as_str()) {
            return error(401, "missing or wrong token");
        }
    }
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    let known = ENDPOINTS.iter().any(|(_, p)| match p.strip_suffix("{requestId}") {
        Some(prefix) => path.starts_with(prefix) && path.len() > prefix.len(),
        None => *p == path,
    });
    match (method, path) {
        ("GET", "/v1/health") => reply(200, json!({"status": "ok"})),
        ("GET", "/v1/pending") => {
            let items: Vec<Value> = state
                .queue
                .list()
                .into_iter()
                .map(|p| {
                    json!({
                        "requestId": p.request.request_id.to_hex(),
                        "op": p.request.op,
                        "target": p.request.target,
                        "reasoning": p.request.reasoning,
                        "originSkillId": p.request.origin_skill_id,
                        "level": p.request.level.as_str(),
                        "secondsRemaining": p.seconds_remaining,
                    })
                })
                .collect();
            reply(200, json!({"pending": items}))
        }
        ("GET", "/v1/audit") => {
            let from = match query_param(query, "from").map(str::parse::<u64>) {
                None => 0,
                Some(Ok(n)) => n,
                Some(Err(_)) => return error(400, "from must be a non-negative integer"),
            };
            let chain = match state.audit.verify() {
                ChainVerdict::Ok => json!({"ok": true}),
                ChainVerdict::BrokenAt(k) => json!({"ok": false, "brokenAt": k}),
            };
            let records: Vec<Value> = state.audit.records_from(from).iter().map(|r| r.to_value()).collect();
            let head = state.audit.head().map(|h| h.to_string());
            reply(
                200,
                json!({"records": records, "length": state.audit.len(), "head": head, "chain": chain}),
            )
        }
        ("POST", p) if p.starts_with("/v1/decisions/") => {
            let Ok(id) = p["/v1/decisions/".len()..].parse::<RequestId>() else {
                return error(404, "unknown request id");
            };
            let decision = match parse_strict(body) {
                Ok(Value::Object(obj)) if obj.len() == 1 => {
                    obj.get("decision").and_then(Value::as_str).map(str::parse::<Decision>)
                }
                _ => None,
            };
            let Some(Ok(decision)) = decision else {
                return error(400, r#"body must be {"decision":"approve"|"deny"}"#);
            };
            match state.queue.decide(&id, decision) {
                Ok(()) => reply(200, json!({"requestId": id.to_hex(), "decision": decision.as_str()})),
                Err(QueueError::Unknown) => error(404, "unknown request id"),
                Err(QueueError::AlreadyDecided) => error(409, "request already decided"),
            }
        }
        _ if known => error(405, "method not allowed"),
        _ => error(404, "no such endpoint"),
    }
}

/// A running HTTP listener.
pub struct Server {
    inner: Arc<tiny_http::Server>,
    addr: SocketAddr,
    worker: Option<JoinHandle<()>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.inner.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

const MAX_BODY: u64 = 64 * 1024;

/// Serves `state` on `addr` from a background thread, one request at a
/// time, so racing decisions resolve in arrival order.
pub fn serve(state: ApiState, addr: &str) -> std::io::Result<Server> {
    let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| std::io::Error::other("not an IP listener"))?;
    let inner = Arc::new(server);
    let srv = inner.clone();
    let worker = std::thread::spawn(move || {
        for mut req in srv.incoming_requests() {
            let token = req
                .headers()
                .iter()
                .find(|h| h.field.equiv(TOKEN_HEADER))
                .map(|h| h.value.as_str().to_string());
            let mut body = Vec::new();
            let read = req.as_reader().take(MAX_BODY).read_to_end(&mut body);
            let resp = match read {
                Ok(_) => handle(&state, req.method().as_str(), req.url(), token.as_deref(), &body),
                Err(e) => error(400, e.to_string()),
            };
            let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
            let out = tiny_http::Response::from_string(resp.body.to_string())
                .with_status_code(resp.status)
                .with_header(header);
            if let Err(e) = req.respond(out) {
                log::warn!("api response failed: {e}");
            }
        }
    });
    Ok(Server {
        inner,
        addr: bound,
        worker: Some(worker),
    })
}
