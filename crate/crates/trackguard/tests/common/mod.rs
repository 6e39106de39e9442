//! Shared scaffolding for integration tests: an in-process proxy stack
//! (engine + proxy + control API), fixture wiring, and a raw proxy
//! client for request-level assertions.

#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use trackguard::control::ControlApi;
use trackguard::fixture::{CorpusSpec, Fixture};
use trackguard::harness::ProxyEndpoints;
use trackguard::http1::{self, HttpResponse, NetStream, RequestHead};
use trackguard::proxy::{Engine, Proxy, ProxyConfig};
use trackguard::store::PrefixStore;

/// A proxy plus its control API, both on ephemeral loopback ports.
pub struct Stack {
    pub engine: Arc<Engine>,
    pub proxy_addr: String,
    pub control_addr: String,
}

impl Stack {
    pub async fn start(store: PrefixStore, resolve: HashMap<String, String>) -> Stack {
        Stack::start_with(store, resolve, |_| {}).await
    }

    pub async fn start_with<F>(
        store: PrefixStore,
        resolve: HashMap<String, String>,
        tweak: F,
    ) -> Stack
    where
        F: FnOnce(&mut ProxyConfig),
    {
        let mut config = ProxyConfig {
            listen: "127.0.0.1:0".to_string(),
            resolve,
            ..ProxyConfig::default()
        };
        tweak(&mut config);
        let engine = Engine::new(store, config).expect("engine config");
        let proxy = Proxy::bind(engine.clone()).await.expect("bind proxy");
        let proxy_addr = proxy.local_addr().unwrap().to_string();
        tokio::spawn(proxy.run());
        let control = ControlApi::bind(engine.clone(), "127.0.0.1:0")
            .await
            .expect("bind control");
        let control_addr = control.local_addr().unwrap().to_string();
        tokio::spawn(control.run());
        Stack {
            engine,
            proxy_addr,
            control_addr,
        }
    }

    pub fn endpoints(&self) -> ProxyEndpoints {
        ProxyEndpoints {
            proxy: self.proxy_addr.clone(),
            control: self.control_addr.clone(),
        }
    }

    /// GET an absolute URL through the proxy with optional session
    /// attribution headers.
    pub async fn get(
        &self,
        url: &str,
        session: Option<&str>,
        kind: Option<&str>,
        element: Option<&str>,
        referer: Option<&str>,
    ) -> HttpResponse {
        let mut head = RequestHead::new("GET", url);
        if let Some(s) = session {
            head.headers.push("X-TP-Session", s);
        }
        if let Some(k) = kind {
            head.headers.push("X-TP-Kind", k);
        }
        if let Some(e) = element {
            head.headers.push("X-TP-Element", e);
        }
        if let Some(r) = referer {
            head.headers.push("Referer", r);
        }
        head.headers.push("Connection", "close");
        http1::fetch(&self.proxy_addr, &head)
            .await
            .expect("proxy reachable")
    }

    /// Issue a request against the control API.
    pub async fn control(&self, method: &str, path: &str) -> HttpResponse {
        let mut head = RequestHead::new(method, path);
        head.headers.push("Host", &self.control_addr);
        head.headers.push("Connection", "close");
        http1::fetch(&self.control_addr, &head)
            .await
            .expect("control reachable")
    }

    pub async fn control_json(&self, method: &str, path: &str) -> serde_json::Value {
        let response = self.control(method, path).await;
        assert_eq!(response.head.status, 200, "{method} {path}");
        serde_json::from_slice(&response.body).expect("control JSON")
    }

    /// Open a CONNECT tunnel. Returns the response head and, when the
    /// tunnel was established, the connection for tunnel traffic.
    pub async fn connect_tunnel(
        &self,
        target: &str,
        session: Option<&str>,
        kind: Option<&str>,
    ) -> (
        http1::ResponseHead,
        Option<NetStream<tokio::net::TcpStream>>,
    ) {
        let mut conn = NetStream::connect(&self.proxy_addr)
            .await
            .expect("dial proxy");
        let mut head = RequestHead::new("CONNECT", target);
        head.headers.push("Host", target);
        if let Some(s) = session {
            head.headers.push("X-TP-Session", s);
        }
        if let Some(k) = kind {
            head.headers.push("X-TP-Kind", k);
        }
        conn.write_all(&head.encode()).await.expect("send CONNECT");
        let (response, _raw) = conn.read_response().await.expect("CONNECT response");
        if response.status == 200 {
            (response, Some(conn))
        } else {
            (response, None)
        }
    }
}

/// Start a fixture and a protected/unprotected stack pair wired to it.
pub struct Lab {
    pub fixture: Arc<Fixture>,
    pub protected: Stack,
    pub unprotected: Stack,
}

impl Lab {
    pub async fn start(spec: &CorpusSpec, tracker_domains: &[&str]) -> Lab {
        let fixture = Arc::new(Fixture::start(spec).await.expect("fixture"));
        let resolve = fixture.resolve_map();
        let store = PrefixStore::build(
            tracker_domains
                .iter()
                .map(|d| format!("{d}/"))
                .collect::<Vec<_>>(),
        )
        .expect("tracker store");
        let protected = Stack::start(store, resolve.clone()).await;
        let unprotected = Stack::start(PrefixStore::empty(), resolve).await;
        Lab {
            fixture,
            protected,
            unprotected,
        }
    }
}

/// Canned update server: each GET answers with the next (status, body)
/// pair, repeating the last one forever. Returns its endpoint URL.
pub async fn spawn_update_server(responses: Vec<(u16, String)>) -> String {
    use tokio::io::AsyncWriteExt;
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        let mut served = 0usize;
        loop {
            let Ok((mut socket, _)) = listener.accept().await else {
                return;
            };
            let (status, body) = responses
                .get(served.min(responses.len() - 1))
                .cloned()
                .unwrap_or((304, String::new()));
            served += 1;
            let mut conn = NetStream::new(&mut socket);
            if conn.read_request().await.ok().flatten().is_none() {
                continue;
            }
            let reason = if status == 304 { "Not Modified" } else { "OK" };
            let head = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            let _ = socket.write_all(head.as_bytes()).await;
            let _ = socket.write_all(body.as_bytes()).await;
        }
    });
    format!("http://{addr}/list")
}
