//! Local control API.
//!
//! Small JSON-over-HTTP surface standing in for the browser's shield UI:
//! engine status, telemetry counters, per-site override management, a
//! forced list reload, and page-session reports for the measurement
//! harness. Binds loopback by default: it mutates security policy and
//! carries no authentication.

use std::io;
use std::sync::Arc;

use serde::Serialize;
use tokio::net::{TcpListener, TcpStream};

use crate::canonical;
use crate::http1::{NetStream, RequestHead};
use crate::proxy::Engine;
use crate::update::UpdaterReport;

#[derive(Debug, Serialize)]
struct StatusReport<'a> {
    store_version: u64,
    expression_count: usize,
    updater: Option<UpdaterReport>,
    uptime_secs: u64,
    config: ConfigEcho<'a>,
}

#[derive(Debug, Serialize)]
struct ConfigEcho<'a> {
    listen: &'a str,
    control: Option<&'a str>,
    third_party_only: bool,
    block_status: u16,
}

pub struct ControlApi {
    engine: Arc<Engine>,
    listener: TcpListener,
}

impl ControlApi {
    pub async fn bind(engine: Arc<Engine>, addr: &str) -> io::Result<ControlApi> {
        let listener = TcpListener::bind(addr).await?;
        Ok(ControlApi { engine, listener })
    }

    pub fn local_addr(&self) -> io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    pub async fn run(self) -> io::Result<()> {
        loop {
            let (stream, _) = self.listener.accept().await?;
            let engine = self.engine.clone();
            tokio::spawn(async move {
                let _ = serve_connection(engine, stream).await;
            });
        }
    }
}

async fn serve_connection(engine: Arc<Engine>, stream: TcpStream) -> io::Result<()> {
    let mut conn = NetStream::new(stream);
    loop {
        let Some(request) = conn.read_request().await? else {
            return Ok(());
        };
        let close = request.wants_close();
        let framing = crate::http1::request_body_framing(&request);
        let _ = conn.read_body(framing).await;
        let (status, reason, body) = route(&engine, &request).await;
        conn.write_response(
            status,
            reason,
            &[("Content-Type", "application/json")],
            body.as_bytes(),
        )
        .await?;
        if close {
            return Ok(());
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).unwrap_or_else(|_| "{}".to_string());
    s.push('\n');
    s
}

fn error_body(message: &str) -> String {
    json(&serde_json::json!({ "error": message }))
}

async fn route(engine: &Arc<Engine>, request: &RequestHead) -> (u16, &'static str, String) {
    let path = request.target.split('?').next().unwrap_or("");
    let method = request.method.to_ascii_uppercase();
    match (method.as_str(), path) {
        ("GET", "/status") => {
            let store = engine.store.current();
            let report = StatusReport {
                store_version: store.version(),
                expression_count: store.expression_count(),
                updater: engine.updater().map(|u| u.report()),
                uptime_secs: engine.started.elapsed().as_secs(),
                config: ConfigEcho {
                    listen: &engine.config.listen,
                    control: engine.config.control.as_deref(),
                    third_party_only: engine.config.third_party_only,
                    block_status: engine.config.block_status,
                },
            };
            (200, "OK", json(&report))
        }
        ("GET", "/stats") => (200, "OK", json(&engine.telemetry.snapshot())),
        ("GET", "/overrides") => (200, "OK", json(&engine.overrides.sites())),
        ("PUT" | "DELETE", _) if path.starts_with("/override/") => {
            let raw = &path["/override/".len()..];
            let Ok(host) = canonical::canonicalize_host_str(raw) else {
                return (400, "Bad Request", error_body("invalid domain"));
            };
            if method == "PUT" {
                engine.overrides.set(&host, &engine.psl);
            } else {
                engine.overrides.clear(&host, &engine.psl);
            }
            engine.persist_overrides();
            (204, "No Content", String::new())
        }
        ("POST", "/list/reload") => match engine.updater() {
            Some(updater) => {
                let outcome = updater.update_once().await;
                log::info!("forced list reload: {outcome:?}");
                (
                    202,
                    "Accepted",
                    json(&serde_json::json!({
                        "outcome": format!("{outcome:?}"),
                        "store_version": engine.store.current().version(),
                    })),
                )
            }
            None => (
                503,
                "Service Unavailable",
                error_body("no update endpoint configured"),
            ),
        },
        ("GET", _) if path.starts_with("/session/") => {
            let id = &path["/session/".len()..];
            match engine.sessions.report(id) {
                Some(snapshot) => (200, "OK", json(&snapshot)),
                None => (404, "Not Found", error_body("unknown session")),
            }
        }
        ("POST", _) if path.starts_with("/session/") && path.ends_with("/finalize") => {
            let id = &path["/session/".len()..path.len() - "/finalize".len()];
            match engine.finalize_session(id) {
                Some(snapshot) => (200, "OK", json(&snapshot)),
                None => (404, "Not Found", error_body("unknown session")),
            }
        }
        _ => (404, "Not Found", error_body("no such route")),
    }
}
