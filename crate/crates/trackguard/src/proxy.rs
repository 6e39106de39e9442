//! Filtering HTTP forward proxy.
//!
//! Stands in for the browser network layer: every request is held until
//! classified, then forwarded upstream or refused on the spot. A refusal
//! is an explicit error response, status `block_status` (403 by default)
//! with `X-Tracking-Protection: blocked` and the matched expression in
//! `X-TP-Matched`, and no upstream connection is ever opened for it.
//! CONNECT tunnels get the same treatment at host granularity; allowed
//! tunnels relay opaque bytes with no TLS interception.
//!
//! Clients may attribute requests to a page session with `X-TP-Session`,
//! declare `X-TP-Kind: navigation|subresource`, and tag the element type
//! with `X-TP-Element`. Without those, the first party falls back to the
//! Referer host and requests bearing a Referer count as subresources.

use std::collections::HashMap;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};

use crate::canonical::{self, CanonicalUrl, Scheme};
use crate::http1::{self, BodyFraming, NetStream, RequestHead};
use crate::policy::{
    self, Decision, ElementHint, OverrideSet, PolicyConfig, RequestKind, RequestMeta,
    TelemetryCounters,
};
use crate::psl::PublicSuffixList;
use crate::session::{PageSessionSnapshot, SessionRegistry};
use crate::store::{PrefixStore, StoreHandle};
use crate::update::Updater;

pub const HEADER_MARKER: &str = "X-Tracking-Protection";
pub const HEADER_MATCHED: &str = "X-TP-Matched";
pub const HEADER_SESSION: &str = "X-TP-Session";
pub const HEADER_KIND: &str = "X-TP-Kind";
pub const HEADER_ELEMENT: &str = "X-TP-Element";

const UPSTREAM_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub listen: String,
    pub third_party_only: bool,
    /// Status for refused requests; must lie in 400..=599.
    pub block_status: u16,
    pub control: Option<String>,
    /// Host-level upstream overrides (fixture routing): logical host ->
    /// socket address to dial instead of DNS.
    pub resolve: HashMap<String, String>,
    /// Where the override set persists; no persistence when absent.
    pub overrides_path: Option<PathBuf>,
}

impl Default for ProxyConfig {
    fn default() -> ProxyConfig {
        ProxyConfig {
            listen: "127.0.0.1:8888".to_string(),
            third_party_only: false,
            block_status: 403,
            control: None,
            resolve: HashMap::new(),
            overrides_path: None,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(400..=599).contains(&self.block_status) {
            return Err(format!(
                "block_status {} outside 400..=599",
                self.block_status
            ));
        }
        Ok(())
    }
}

/// Shared state behind the proxy and control API: the live store, policy
/// inputs, telemetry, and page sessions.
#[derive(Debug)]
pub struct Engine {
    pub store: Arc<StoreHandle>,
    pub overrides: OverrideSet,
    pub psl: PublicSuffixList,
    pub telemetry: TelemetryCounters,
    pub sessions: SessionRegistry,
    pub config: ProxyConfig,
    pub started: Instant,
    updater: std::sync::OnceLock<Arc<Updater>>,
}

impl Engine {
    pub fn new(store: PrefixStore, config: ProxyConfig) -> Result<Arc<Engine>, String> {
        config.validate()?;
        let overrides = match &config.overrides_path {
            Some(path) if path.exists() => OverrideSet::load(path)
                .map_err(|e| format!("loading overrides {}: {e}", path.display()))?,
            _ => OverrideSet::new(),
        };
        Ok(Arc::new(Engine {
            store: Arc::new(StoreHandle::new(store)),
            overrides,
            psl: PublicSuffixList::bundled(),
            telemetry: TelemetryCounters::new(),
            sessions: SessionRegistry::new(),
            config,
            started: Instant::now(),
            updater: std::sync::OnceLock::new(),
        }))
    }

    pub fn attach_updater(&self, updater: Arc<Updater>) {
        let _ = self.updater.set(updater);
    }

    pub fn updater(&self) -> Option<&Arc<Updater>> {
        self.updater.get()
    }

    fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            third_party_only: self.config.third_party_only,
        }
    }

    pub fn classify(&self, meta: &RequestMeta) -> Decision {
        policy::classify(
            meta,
            &self.store.current(),
            &self.overrides,
            &self.psl,
            &self.policy_config(),
        )
    }

    /// Upstream dial address for a host, honoring resolve overrides.
    pub fn upstream_addr(&self, host: &str, port: u16) -> String {
        match self.config.resolve.get(host) {
            Some(addr) => addr.clone(),
            None => format!("{host}:{port}"),
        }
    }

    /// Close out a page session and account it to a telemetry bucket.
    pub fn finalize_session(&self, id: &str) -> Option<PageSessionSnapshot> {
        let snapshot = self.sessions.finalize(id)?;
        self.telemetry
            .record_page_load(&snapshot, &self.overrides, &self.psl);
        Some(snapshot)
    }

    pub fn persist_overrides(&self) {
        if let Some(path) = &self.config.overrides_path {
            if let Err(e) = self.overrides.save(path) {
                log::warn!("persisting overrides to {}: {e}", path.display());
            }
        }
    }
}

/// A bound, not-yet-running proxy. Binding is separate from running so
/// callers can learn the ephemeral port before traffic starts.
pub struct Proxy {
    engine: Arc<Engine>,
    listener: TcpListener,
}

impl Proxy {
    pub async fn bind(engine: Arc<Engine>) -> io::Result<Proxy> {
        let listener = TcpListener::bind(&engine.config.listen).await?;
        Ok(Proxy { engine, listener })
    }

    pub fn local_addr(&self) -> io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    pub fn engine(&self) -> Arc<Engine> {
        self.engine.clone()
    }

    pub async fn run(self) -> io::Result<()> {
        loop {
            let (stream, peer) = self.listener.accept().await?;
            let engine = self.engine.clone();
            tokio::spawn(async move {
                if let Err(e) = serve_connection(engine, stream).await {
                    log::debug!("connection from {peer}: {e}");
                }
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
        if request.method.eq_ignore_ascii_case("CONNECT") {
            return handle_connect(&engine, conn, request).await;
        }
        let close = request.wants_close();
        let keep_open = handle_http(&engine, &mut conn, request).await?;
        if close || !keep_open {
            return Ok(());
        }
    }
}

/// Request metadata the proxy can infer for one request.
struct Attribution {
    session_id: Option<String>,
    kind: RequestKind,
    first_party: Option<String>,
    element_hint: Option<ElementHint>,
}

fn attribute(engine: &Engine, request: &RequestHead, url_host: &str) -> Attribution {
    let session_id = request
        .headers
        .get(HEADER_SESSION)
        .map(str::to_string)
        .filter(|s| !s.is_empty());
    let element_hint = request
        .headers
        .get(HEADER_ELEMENT)
        .and_then(|v| v.parse().ok());
    let referer_host = request
        .headers
        .get("Referer")
        .and_then(|r| canonical::parse_and_canonicalize(r).ok())
        .map(|u| u.host);

    let kind = match request.headers.get(HEADER_KIND) {
        Some(v) if v.eq_ignore_ascii_case("navigation") => RequestKind::Navigation,
        Some(v) if v.eq_ignore_ascii_case("subresource") => RequestKind::Subresource,
        // A proxy cannot see the DOM: requests bearing a Referer count as
        // subresources, bare requests as navigations.
        _ => {
            if referer_host.is_some() {
                RequestKind::Subresource
            } else {
                RequestKind::Navigation
            }
        }
    };

    let first_party = if kind == RequestKind::Navigation {
        None
    } else {
        session_id
            .as_deref()
            .and_then(|id| engine.sessions.first_party(id))
            .or(referer_host)
    };

    if kind == RequestKind::Navigation {
        if let Some(id) = &session_id {
            engine.sessions.note_navigation(id, url_host);
        }
    }

    Attribution {
        session_id,
        kind,
        first_party,
        element_hint,
    }
}

async fn write_block_response<S>(
    conn: &mut NetStream<S>,
    status: u16,
    expression: &str,
) -> io::Result<()>
where
    S: tokio::io::AsyncRead + tokio::io::AsyncWrite + Unpin,
{
    conn.write_response(
        status,
        "Blocked",
        &[(HEADER_MARKER, "blocked"), (HEADER_MATCHED, expression)],
        b"",
    )
    .await
}

/// Handle one non-CONNECT exchange. Returns whether the client
/// connection is still in a known-good state for keep-alive.
async fn handle_http<S>(
    engine: &Engine,
    conn: &mut NetStream<S>,
    request: RequestHead,
) -> io::Result<bool>
where
    S: tokio::io::AsyncRead + tokio::io::AsyncWrite + Unpin,
{
    // Proxy requests use absolute-form targets; anything else is not ours
    // to serve.
    let url = match canonical::parse_and_canonicalize(&request.target) {
        Ok(url) => url,
        Err(e) => {
            // Drain any request body so the connection stays usable.
            let framing = http1::request_body_framing(&request);
            let _ = conn.read_body(framing).await;
            conn.write_response(400, "Bad Request", &[], format!("{e}\n").as_bytes())
                .await?;
            return Ok(true);
        }
    };

    let attribution = attribute(engine, &request, &url.host);
    let meta = RequestMeta {
        url: url.clone(),
        kind: attribution.kind,
        first_party_host: attribution.first_party.clone(),
        element_hint: attribution.element_hint,
    };
    let decision = engine.classify(&meta);

    if decision.is_blocked() {
        let expression = decision.matched_expression.as_deref().unwrap_or("");
        if let Some(id) = &attribution.session_id {
            engine
                .sessions
                .record_blocked(id, attribution.element_hint, true);
        }
        // The client may have sent a body; consume it before answering so
        // keep-alive framing stays intact.
        let framing = http1::request_body_framing(&request);
        let _ = conn.read_body(framing).await;
        write_block_response(conn, engine.config.block_status, expression).await?;
        return Ok(true);
    }

    let matched = decision.matched_expression.is_some();
    match forward_request(engine, conn, &request, &url).await {
        Ok(bytes) => {
            if let Some(id) = &attribution.session_id {
                engine
                    .sessions
                    .record_allowed(id, &url.host, bytes, matched);
            }
            Ok(true)
        }
        Err(e) => {
            log::debug!("upstream {} failed: {e}", url.host);
            if let Some(id) = &attribution.session_id {
                engine.sessions.record_failed(id, matched);
            }
            conn.write_response(
                502,
                "Bad Gateway",
                &[(HEADER_MARKER, "upstream-error")],
                b"",
            )
            .await?;
            // An unread request body (or a half-relayed response) may be
            // in flight; the framing cannot be trusted any further.
            Ok(false)
        }
    }
}

/// Forward an allowed request and relay the response verbatim. Returns
/// wire bytes relayed back to the client (head plus body as framed).
async fn forward_request<S>(
    engine: &Engine,
    conn: &mut NetStream<S>,
    request: &RequestHead,
    url: &CanonicalUrl,
) -> io::Result<u64>
where
    S: tokio::io::AsyncRead + tokio::io::AsyncWrite + Unpin,
{
    let addr = engine.upstream_addr(&url.host, url.effective_port());
    let upstream = tokio::time::timeout(UPSTREAM_CONNECT_TIMEOUT, TcpStream::connect(&addr))
        .await
        .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "upstream connect timeout"))??;
    let mut upstream = NetStream::new(upstream);

    // Rewrite to origin-form and drop hop-by-hop / attribution headers.
    // Upstream connections are one-shot: no reuse, no caching.
    let mut outbound = RequestHead::new(&request.method, &origin_form(url));
    outbound.version = request.version.clone();
    outbound.headers = request.headers.clone();
    for name in [
        "Proxy-Connection",
        "Proxy-Authorization",
        "Connection",
        HEADER_SESSION,
        HEADER_KIND,
        HEADER_ELEMENT,
    ] {
        outbound.headers.remove(name);
    }
    if outbound.headers.get("Host").is_none() {
        outbound.headers.push("Host", &host_header(url));
    }
    outbound.headers.push("Connection", "close");
    upstream.write_all(&outbound.encode()).await?;

    // Relay any request body upstream.
    let request_framing = http1::request_body_framing(request);
    if request_framing != BodyFraming::None {
        conn.relay_body(request_framing, upstream.inner_mut())
            .await?;
        upstream.inner_mut().flush().await?;
    }

    // Relay the response head verbatim, then the body, counting wire
    // bytes exactly as sent.
    let (head, raw_head) = upstream.read_response().await?;
    conn.write_all(&raw_head).await?;
    let framing = http1::response_body_framing(&request.method, &head);
    let body_bytes = upstream.relay_body(framing, conn.inner_mut()).await?;
    conn.inner_mut().flush().await?;
    Ok(raw_head.len() as u64 + body_bytes)
}

fn origin_form(url: &CanonicalUrl) -> String {
    match &url.query {
        Some(q) => format!("{}?{}", url.path, q),
        None => url.path.clone(),
    }
}

fn host_header(url: &CanonicalUrl) -> String {
    match url.port {
        Some(p) => format!("{}:{}", url.host, p),
        None => url.host.clone(),
    }
}

async fn handle_connect(
    engine: &Engine,
    mut conn: NetStream<TcpStream>,
    request: RequestHead,
) -> io::Result<()> {
    let (host, port) = match parse_connect_target(&request.target) {
        Some(t) => t,
        None => {
            return conn
                .write_response(400, "Bad Request", &[], b"bad CONNECT target\n")
                .await;
        }
    };

    let session_id = request
        .headers
        .get(HEADER_SESSION)
        .map(str::to_string)
        .filter(|s| !s.is_empty());
    let kind = match request.headers.get(HEADER_KIND) {
        Some(v) if v.eq_ignore_ascii_case("navigation") => RequestKind::Navigation,
        Some(v) if v.eq_ignore_ascii_case("subresource") => RequestKind::Subresource,
        _ => match &session_id {
            // A pending navigation marked for this host makes the tunnel a
            // navigation; everything else is a subresource.
            Some(id) if engine.sessions.take_pending_navigation(id, &host) => {
                RequestKind::Navigation
            }
            _ => RequestKind::Subresource,
        },
    };
    let first_party = if kind == RequestKind::Navigation {
        if let Some(id) = &session_id {
            engine.sessions.note_navigation(id, &host);
        }
        None
    } else {
        session_id
            .as_deref()
            .and_then(|id| engine.sessions.first_party(id))
    };

    // Only the host is visible for a tunnel, so classification runs on
    // the host-only expression set (path fixed to "/").
    let url = CanonicalUrl {
        scheme: Scheme::Https,
        host: host.clone(),
        port: if port == Scheme::Https.default_port() {
            None
        } else {
            Some(port)
        },
        path: "/".to_string(),
        query: None,
    };
    let meta = RequestMeta {
        url,
        kind,
        first_party_host: first_party,
        element_hint: None,
    };
    let decision = engine.classify(&meta);

    if decision.is_blocked() {
        let expression = decision.matched_expression.as_deref().unwrap_or("");
        if let Some(id) = &session_id {
            engine.sessions.record_blocked(id, None, true);
        }
        return write_block_response(&mut conn, engine.config.block_status, expression).await;
    }

    let matched = decision.matched_expression.is_some();
    let addr = engine.upstream_addr(&host, port);
    let upstream =
        match tokio::time::timeout(UPSTREAM_CONNECT_TIMEOUT, TcpStream::connect(&addr)).await {
            Ok(Ok(stream)) => stream,
            _ => {
                if let Some(id) = &session_id {
                    engine.sessions.record_failed(id, matched);
                }
                return conn
                    .write_response(
                        502,
                        "Bad Gateway",
                        &[(HEADER_MARKER, "upstream-error")],
                        b"",
                    )
                    .await;
            }
        };

    conn.write_all(b"HTTP/1.1 200 Connection established\r\n\r\n")
        .await?;

    // Bytes the client pipelined behind the CONNECT head belong to the
    // tunnel.
    let pending = conn.take_pending();
    let mut client = conn.into_inner();
    let mut upstream = upstream;
    if !pending.is_empty() {
        upstream.write_all(&pending).await?;
    }
    let relayed_down = match tokio::io::copy_bidirectional(&mut client, &mut upstream).await {
        Ok((_up, down)) => down,
        Err(_) => 0,
    };
    if let Some(id) = &session_id {
        engine
            .sessions
            .record_allowed(id, &host, relayed_down, matched);
    }
    Ok(())
}

fn parse_connect_target(target: &str) -> Option<(String, u16)> {
    let (host_part, port_part) = if target.starts_with('[') {
        // Bracketed IPv6.
        let close = target.find(']')?;
        let rest = &target[close + 1..];
        let port = rest.strip_prefix(':')?;
        (&target[..=close], port)
    } else {
        let colon = target.rfind(':')?;
        (&target[..colon], &target[colon + 1..])
    };
    let port: u16 = port_part.parse().ok()?;
    let host = canonical::canonicalize_host_str(host_part).ok()?;
    Some((host, port))
}
