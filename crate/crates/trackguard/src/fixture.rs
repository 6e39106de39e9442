//! Deterministic fixture corpus server.
//!
//! Serves a synthetic web described by a corpus spec: each site host gets
//! a page of subresource elements with fixed sizes, cookies, and
//! artificial latencies. Every distinct host binds its own listener on an
//! ephemeral port and counts connections and requests, so a test can
//! assert that a blocked tracker host literally received zero connection
//! attempts. An admin endpoint publishes the host-to-address map (for the
//! proxy's resolve table) and the counters.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpStream};

use crate::http1::NetStream;
use crate::policy::ElementHint;

fn default_body_bytes() -> u64 {
    1024
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElementSpec {
    pub kind: ElementHint,
    pub host: String,
    pub path: String,
    #[serde(default = "default_body_bytes")]
    pub bytes: u64,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub set_cookie: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteSpec {
    pub host: String,
    #[serde(default = "default_body_bytes")]
    pub page_bytes: u64,
    #[serde(default)]
    pub page_latency_ms: u64,
    #[serde(default)]
    pub page_set_cookie: Vec<String>,
    #[serde(default)]
    pub elements: Vec<ElementSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub sites: Vec<SiteSpec>,
}

impl CorpusSpec {
    pub fn from_json(text: &str) -> Result<CorpusSpec, String> {
        let spec: CorpusSpec = serde_json::from_str(text).map_err(|e| e.to_string())?;
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), String> {
        for site in &self.sites {
            for element in &site.elements {
                if element.kind == ElementHint::Other {
                    return Err(format!(
                        "site {}: element kind \"other\" has no tag to embed",
                        site.host
                    ));
                }
                if !element.path.starts_with('/') {
                    return Err(format!(
                        "site {}: element path {:?} must start with /",
                        site.host, element.path
                    ));
                }
            }
        }
        Ok(())
    }

    /// Every host the corpus references (sites and element hosts).
    pub fn hosts(&self) -> Vec<String> {
        let mut hosts = std::collections::BTreeSet::new();
        for site in &self.sites {
            hosts.insert(site.host.clone());
            for element in &site.elements {
                hosts.insert(element.host.clone());
            }
        }
        hosts.into_iter().collect()
    }
}

/// The page served at "/" on a site host, padded to `page_bytes`.
pub fn page_html(site: &SiteSpec) -> String {
    let mut html = String::from("<!doctype html>\n<html><head>\n");
    for element in &site.elements {
        let url = format!("http://{}{}", element.host, element.path);
        let tag = match element.kind {
            ElementHint::Script => format!("<script src=\"{url}\"></script>"),
            ElementHint::Img => format!("<img src=\"{url}\">"),
            ElementHint::Iframe => format!("<iframe src=\"{url}\"></iframe>"),
            ElementHint::Object => format!("<object data=\"{url}\"></object>"),
            ElementHint::Stylesheet => format!("<link rel=\"stylesheet\" href=\"{url}\">"),
            ElementHint::Other => String::new(),
        };
        html.push_str(&tag);
        html.push('\n');
    }
    html.push_str("</head><body><h1>fixture</h1></body></html>\n");
    pad_to(html, site.page_bytes as usize)
}

fn pad_to(mut text: String, target: usize) -> String {
    if text.len() < target {
        text.push_str("<!--");
        while text.len() < target.saturating_sub(3) {
            text.push('#');
        }
        text.push_str("-->");
    }
    text
}

/// Deterministic resource body of exactly `bytes` length.
pub fn resource_body(kind: ElementHint, bytes: u64) -> Vec<u8> {
    let seed = match kind {
        ElementHint::Script => b'j',
        ElementHint::Img => b'i',
        ElementHint::Iframe => b'f',
        ElementHint::Object => b'o',
        ElementHint::Stylesheet => b'c',
        ElementHint::Other => b'x',
    };
    vec![seed; bytes as usize]
}

fn content_type(kind: ElementHint) -> &'static str {
    match kind {
        ElementHint::Script => "application/javascript",
        ElementHint::Img => "image/gif",
        ElementHint::Iframe => "text/html",
        ElementHint::Object => "application/octet-stream",
        ElementHint::Stylesheet => "text/css",
        ElementHint::Other => "application/octet-stream",
    }
}

#[derive(Debug, Default)]
pub struct HostCounters {
    pub connections: AtomicU64,
    pub requests: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HostStats {
    pub connections: u64,
    pub requests: u64,
}

#[derive(Debug, Clone)]
struct Resource {
    kind: ElementHint,
    body: Vec<u8>,
    latency: Duration,
    set_cookie: Vec<String>,
}

struct HostSite {
    counters: Arc<HostCounters>,
    resources: HashMap<String, Resource>,
}

/// A running fixture: one listener per host plus shared counters.
pub struct Fixture {
    map: BTreeMap<String, String>,
    counters: BTreeMap<String, Arc<HostCounters>>,
}

impl Fixture {
    /// Bind every host in the corpus on its own ephemeral loopback port
    /// and start serving.
    pub async fn start(spec: &CorpusSpec) -> io::Result<Fixture> {
        let mut routes: HashMap<String, HashMap<String, Resource>> = HashMap::new();
        for site in &spec.sites {
            let page = Resource {
                kind: ElementHint::Iframe, // text/html
                body: page_html(site).into_bytes(),
                latency: Duration::from_millis(site.page_latency_ms),
                set_cookie: site.page_set_cookie.clone(),
            };
            routes
                .entry(site.host.clone())
                .or_default()
                .insert("/".to_string(), page);
            for element in &site.elements {
                let resource = Resource {
                    kind: element.kind,
                    body: resource_body(element.kind, element.bytes),
                    latency: Duration::from_millis(element.latency_ms),
                    set_cookie: element.set_cookie.clone(),
                };
                routes
                    .entry(element.host.clone())
                    .or_default()
                    .insert(element.path.clone(), resource);
            }
        }

        let mut map = BTreeMap::new();
        let mut counters = BTreeMap::new();
        for (host, resources) in routes {
            let listener = TcpListener::bind("127.0.0.1:0").await?;
            let addr = listener.local_addr()?;
            let site = Arc::new(HostSite {
                counters: Arc::new(HostCounters::default()),
                resources,
            });
            map.insert(host.clone(), addr.to_string());
            counters.insert(host.clone(), site.counters.clone());
            tokio::spawn(accept_loop(listener, site));
        }
        Ok(Fixture { map, counters })
    }

    /// host -> "ip:port" table for the proxy's resolve map.
    pub fn resolve_map(&self) -> HashMap<String, String> {
        self.map.clone().into_iter().collect()
    }

    pub fn addr_of(&self, host: &str) -> Option<&str> {
        self.map.get(host).map(String::as_str)
    }

    pub fn stats(&self) -> BTreeMap<String, HostStats> {
        self.counters
            .iter()
            .map(|(host, c)| {
                (
                    host.clone(),
                    HostStats {
                        connections: c.connections.load(Ordering::Relaxed),
                        requests: c.requests.load(Ordering::Relaxed),
                    },
                )
            })
            .collect()
    }

    pub fn reset(&self) {
        for c in self.counters.values() {
            c.connections.store(0, Ordering::Relaxed);
            c.requests.store(0, Ordering::Relaxed);
        }
    }
}

async fn accept_loop(listener: TcpListener, site: Arc<HostSite>) {
    loop {
        let Ok((stream, _)) = listener.accept().await else {
            return;
        };
        site.counters.connections.fetch_add(1, Ordering::Relaxed);
        let site = site.clone();
        tokio::spawn(async move {
            let _ = serve_host(stream, site).await;
        });
    }
}

async fn serve_host(stream: TcpStream, site: Arc<HostSite>) -> io::Result<()> {
    let mut conn = NetStream::new(stream);
    loop {
        let Some(request) = conn.read_request().await? else {
            return Ok(());
        };
        site.counters.requests.fetch_add(1, Ordering::Relaxed);
        let close = request.wants_close();
        let path = request.target.split('?').next().unwrap_or("/");
        match site.resources.get(path) {
            Some(resource) => {
                if !resource.latency.is_zero() {
                    tokio::time::sleep(resource.latency).await;
                }
                let mut headers: Vec<(&str, &str)> =
                    vec![("Content-Type", content_type(resource.kind))];
                for cookie in &resource.set_cookie {
                    headers.push(("Set-Cookie", cookie));
                }
                conn.write_response(200, "OK", &headers, &resource.body)
                    .await?;
            }
            None => {
                conn.write_response(404, "Not Found", &[], b"no such fixture resource\n")
                    .await?;
            }
        }
        if close {
            return Ok(());
        }
    }
}

/// Admin server: publishes the resolve map and counters.
pub struct FixtureAdmin {
    fixture: Arc<Fixture>,
    listener: TcpListener,
}

impl FixtureAdmin {
    pub async fn bind(fixture: Arc<Fixture>, addr: &str) -> io::Result<FixtureAdmin> {
        let listener = TcpListener::bind(addr).await?;
        Ok(FixtureAdmin { fixture, listener })
    }

    pub fn local_addr(&self) -> io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    pub async fn run(self) -> io::Result<()> {
        loop {
            let (stream, _) = self.listener.accept().await?;
            let fixture = self.fixture.clone();
            tokio::spawn(async move {
                let mut conn = NetStream::new(stream);
                while let Ok(Some(request)) = conn.read_request().await {
                    let close = request.wants_close();
                    let path = request.target.split('?').next().unwrap_or("");
                    let (status, body) = match (request.method.as_str(), path) {
                        ("GET", "/map") => (
                            200,
                            serde_json::to_string_pretty(&fixture.resolve_map())
                                .unwrap_or_default(),
                        ),
                        ("GET", "/stats") => (
                            200,
                            serde_json::to_string_pretty(&fixture.stats()).unwrap_or_default(),
                        ),
                        ("POST", "/reset") => {
                            fixture.reset();
                            (200, "{}".to_string())
                        }
                        _ => (404, "{\"error\":\"no such route\"}".to_string()),
                    };
                    let reason = if status == 200 { "OK" } else { "Not Found" };
                    if conn
                        .write_response(
                            status,
                            reason,
                            &[("Content-Type", "application/json")],
                            body.as_bytes(),
                        )
                        .await
                        .is_err()
                        || close
                    {
                        break;
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http1::{self, RequestHead};

    fn demo_spec() -> CorpusSpec {
        CorpusSpec {
            sites: vec![SiteSpec {
                host: "news.example".into(),
                page_bytes: 2048,
                page_latency_ms: 0,
                page_set_cookie: vec!["fp=1; Max-Age=3600".into()],
                elements: vec![
                    ElementSpec {
                        kind: ElementHint::Script,
                        host: "tracker.example".into(),
                        path: "/t.js".into(),
                        bytes: 500,
                        latency_ms: 0,
                        set_cookie: vec!["tid=9".into()],
                    },
                    ElementSpec {
                        kind: ElementHint::Img,
                        host: "cdn.news.example".into(),
                        path: "/logo.gif".into(),
                        bytes: 300,
                        latency_ms: 0,
                        set_cookie: vec![],
                    },
                ],
            }],
        }
    }

    #[test]
    fn page_html_lists_elements_and_pads() {
        let spec = demo_spec();
        let html = page_html(&spec.sites[0]);
        assert!(html.contains("src=\"http://tracker.example/t.js\""));
        assert!(html.contains("src=\"http://cdn.news.example/logo.gif\""));
        assert_eq!(html.len(), 2048);
    }

    #[test]
    fn corpus_validation() {
        assert!(CorpusSpec::from_json(r#"{"sites":[]}"#).is_ok());
        let bad = r#"{"sites":[{"host":"a.example","elements":[
            {"kind":"other","host":"b.example","path":"/x"}]}]}"#;
        assert!(CorpusSpec::from_json(bad).is_err());
        let bad_path = r#"{"sites":[{"host":"a.example","elements":[
            {"kind":"img","host":"b.example","path":"x"}]}]}"#;
        assert!(CorpusSpec::from_json(bad_path).is_err());
    }

    #[tokio::test]
    async fn serves_resources_and_counts() {
        let fixture = Fixture::start(&demo_spec()).await.unwrap();
        let addr = fixture.addr_of("tracker.example").unwrap().to_string();

        let mut head = RequestHead::new("GET", "/t.js");
        head.headers.push("Host", "tracker.example");
        head.headers.push("Connection", "close");
        let resp = http1::fetch(&addr, &head).await.unwrap();
        assert_eq!(resp.head.status, 200);
        assert_eq!(resp.body.len(), 500);
        assert_eq!(resp.header("Set-Cookie"), Some("tid=9"));

        let stats = fixture.stats();
        assert_eq!(stats["tracker.example"].connections, 1);
        assert_eq!(stats["tracker.example"].requests, 1);
        assert_eq!(stats["news.example"].connections, 0);

        fixture.reset();
        assert_eq!(fixture.stats()["tracker.example"].connections, 0);
    }

    #[tokio::test]
    async fn unknown_path_404s() {
        let fixture = Fixture::start(&demo_spec()).await.unwrap();
        let addr = fixture.addr_of("news.example").unwrap().to_string();
        let mut head = RequestHead::new("GET", "/nope");
        head.headers.push("Host", "news.example");
        head.headers.push("Connection", "close");
        let resp = http1::fetch(&addr, &head).await.unwrap();
        assert_eq!(resp.head.status, 404);
    }
}
