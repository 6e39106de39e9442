//! Page fetching through the filtering proxy.
//!
//! The harness is a fetcher, not a browser: it retrieves the page, pulls
//! its direct subresources (one level deep, bounded parallelism), and
//! lets the proxy's session report supply the request/blocked/byte
//! counters. No script execution and no caching: every request is a
//! fresh connection with no conditional headers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::Serialize;
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::canonical::{self, CanonicalUrl};
use crate::harness::extract::extract_subresources;
use crate::http1::{self, HttpResponse, RequestHead};
use crate::policy::ElementHint;
use crate::proxy::{HEADER_ELEMENT, HEADER_KIND, HEADER_MARKER, HEADER_SESSION};
use crate::session::PageSessionSnapshot;

#[derive(Debug, Clone, Error)]
pub enum HarnessError {
    #[error("site unreachable: {0}")]
    SiteUnreachable(String),
    #[error("proxy control error: {0}")]
    Control(String),
    #[error("invalid site URL {0:?}")]
    BadSite(String),
}

/// Addresses of one proxy instance: the forward proxy itself and its
/// control API (for session reports).
#[derive(Debug, Clone)]
pub struct ProxyEndpoints {
    pub proxy: String,
    pub control: String,
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    /// Concurrent subresource fetches per host.
    pub per_host_parallelism: usize,
    pub request_timeout: Duration,
}

impl Default for FetchOptions {
    fn default() -> FetchOptions {
        FetchOptions {
            per_host_parallelism: 6,
            request_timeout: Duration::from_secs(30),
        }
    }
}

/// A cookie's identity in the store model: (name, domain, path).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CookieKey {
    pub name: String,
    pub domain: String,
    pub path: String,
}

/// Everything observed while fetching one page once.
#[derive(Debug, Clone, Serialize)]
pub struct FetchReport {
    pub site: String,
    pub protected: bool,
    pub load_time_ms: f64,
    /// Bytes relayed by the proxy for this session (head + body wire
    /// bytes of allowed responses).
    pub bytes: u64,
    pub requests: u64,
    pub blocked: u64,
    pub blocked_by_type: BTreeMap<ElementHint, u64>,
    pub cookies: BTreeSet<CookieKey>,
    pub contacted_hosts: BTreeSet<String>,
    /// Client-side observation of the same traffic, for cross-checking.
    pub client_wire_bytes: u64,
    pub subresource_failures: u64,
}

/// Parse one Set-Cookie header into its store identity. Returns `None`
/// for unparseable or already-expired (Max-Age <= 0) cookies.
pub fn parse_set_cookie(header: &str, request_host: &str, request_path: &str) -> Option<CookieKey> {
    let mut parts = header.split(';');
    let pair = parts.next()?.trim();
    let eq = pair.find('=')?;
    let name = pair[..eq].trim().to_string();
    if name.is_empty() {
        return None;
    }
    let mut domain = request_host.to_ascii_lowercase();
    let mut path = default_cookie_path(request_path);
    for attr in parts {
        let attr = attr.trim();
        let (key, value) = match attr.find('=') {
            Some(i) => (&attr[..i], attr[i + 1..].trim()),
            None => (attr, ""),
        };
        if key.eq_ignore_ascii_case("domain") && !value.is_empty() {
            domain = value.trim_start_matches('.').to_ascii_lowercase();
        } else if key.eq_ignore_ascii_case("path") && value.starts_with('/') {
            path = value.to_string();
        } else if key.eq_ignore_ascii_case("max-age")
            && value.parse::<i64>().map(|v| v <= 0).unwrap_or(false)
        {
            return None;
        }
    }
    Some(CookieKey { name, domain, path })
}

/// RFC 6265 default-path: the request path up to (excluding) its last "/",
/// or "/" when that leaves nothing.
fn default_cookie_path(request_path: &str) -> String {
    if !request_path.starts_with('/') {
        return "/".to_string();
    }
    match request_path.rfind('/') {
        Some(0) | None => "/".to_string(),
        Some(i) => request_path[..i].to_string(),
    }
}

/// Cookie-store cardinality over a configuration's reports: the union of
/// (name, domain, path) identities.
pub fn count_cookies<'a, I>(reports: I) -> usize
where
    I: IntoIterator<Item = &'a FetchReport>,
{
    let mut union: BTreeSet<&CookieKey> = BTreeSet::new();
    for report in reports {
        union.extend(report.cookies.iter());
    }
    union.len()
}

struct ResponseObservation {
    blocked: bool,
    failed: bool,
    wire_bytes: u64,
    cookies: Vec<CookieKey>,
}

fn observe(response: &HttpResponse, url: &CanonicalUrl) -> ResponseObservation {
    let blocked = response
        .header(HEADER_MARKER)
        .map(|v| v == "blocked")
        .unwrap_or(false);
    let failed = response
        .header(HEADER_MARKER)
        .map(|v| v == "upstream-error")
        .unwrap_or(false);
    let cookies = response
        .head
        .headers
        .all("Set-Cookie")
        .into_iter()
        .filter_map(|h| parse_set_cookie(h, &url.host, &url.path))
        .collect();
    ResponseObservation {
        blocked,
        failed,
        wire_bytes: response.wire_bytes,
        cookies,
    }
}

async fn proxy_get(
    proxy_addr: &str,
    url: &str,
    session: &str,
    kind: &str,
    element: Option<ElementHint>,
    referer: Option<&str>,
    timeout: Duration,
) -> std::io::Result<HttpResponse> {
    let mut head = RequestHead::new("GET", url);
    head.headers.push(HEADER_SESSION, session);
    head.headers.push(HEADER_KIND, kind);
    if let Some(hint) = element {
        head.headers.push(HEADER_ELEMENT, hint.as_str());
    }
    if let Some(referer) = referer {
        head.headers.push("Referer", referer);
    }
    head.headers.push("Connection", "close");
    tokio::time::timeout(timeout, http1::fetch(proxy_addr, &head))
        .await
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::TimedOut, "request timed out"))?
}

fn fresh_session_id() -> String {
    let mut bytes = [0u8; 8];
    rand::thread_rng().fill_bytes(&mut bytes);
    format!("tg-{}", hex(&bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fetch one page through a proxy: top-level request tagged navigation,
/// then every extracted subresource tagged with its element hint, one
/// level deep. Load time runs from the first request until the last
/// subresource completes or is refused.
pub async fn fetch_page(
    site: &str,
    protected: bool,
    endpoints: &ProxyEndpoints,
    opts: &FetchOptions,
) -> Result<FetchReport, HarnessError> {
    let base = canonical::parse_and_canonicalize(site)
        .map_err(|_| HarnessError::BadSite(site.to_string()))?;
    let session = fresh_session_id();
    let started = Instant::now();

    let top = match proxy_get(
        &endpoints.proxy,
        &base.render(),
        &session,
        "navigation",
        None,
        None,
        opts.request_timeout,
    )
    .await
    {
        Ok(top) => top,
        Err(e) => {
            // The navigation may have opened a session; don't leak it.
            let _ = finalize_session(&endpoints.control, &session).await;
            return Err(HarnessError::SiteUnreachable(format!("{site}: {e}")));
        }
    };
    let top_obs = observe(&top, &base);
    if top_obs.failed {
        let _ = finalize_session(&endpoints.control, &session).await;
        return Err(HarnessError::SiteUnreachable(format!(
            "{site}: upstream error"
        )));
    }

    let mut cookies: BTreeSet<CookieKey> = top_obs.cookies.into_iter().collect();
    let mut client_wire_bytes = top_obs.wire_bytes;
    let mut failures = 0u64;

    let html = String::from_utf8_lossy(&top.body);
    let subresources = extract_subresources(&html, &base);

    // Bounded parallelism per host keeps fixture timing stable.
    let mut host_limits: HashMap<String, Arc<Semaphore>> = HashMap::new();
    let mut tasks = Vec::new();
    let referer = base.render();
    for (hint, url) in subresources {
        let Ok(parsed) = canonical::parse_and_canonicalize(&url) else {
            continue;
        };
        let limit = host_limits
            .entry(parsed.host.clone())
            .or_insert_with(|| Arc::new(Semaphore::new(opts.per_host_parallelism)))
            .clone();
        let proxy_addr = endpoints.proxy.clone();
        let session = session.clone();
        let referer = referer.clone();
        let timeout = opts.request_timeout;
        tasks.push(tokio::spawn(async move {
            let _permit = limit.acquire_owned().await.expect("semaphore open");
            let result = proxy_get(
                &proxy_addr,
                &parsed.render(),
                &session,
                "subresource",
                Some(hint),
                Some(&referer),
                timeout,
            )
            .await;
            result.map(|resp| {
                let obs = observe(&resp, &parsed);
                (obs, resp.head.status)
            })
        }));
    }
    for task in tasks {
        match task.await {
            Ok(Ok((obs, _status))) => {
                client_wire_bytes += obs.wire_bytes;
                if obs.failed {
                    failures += 1;
                }
                if !obs.blocked {
                    cookies.extend(obs.cookies);
                }
            }
            Ok(Err(_)) | Err(_) => failures += 1,
        }
    }
    let load_time_ms = started.elapsed().as_secs_f64() * 1000.0;

    let snapshot = finalize_session(&endpoints.control, &session).await?;
    Ok(FetchReport {
        site: site.to_string(),
        protected,
        load_time_ms,
        bytes: snapshot.bytes_downloaded,
        requests: snapshot.request_count,
        blocked: snapshot.blocked_count,
        blocked_by_type: snapshot.blocked_by_type,
        cookies,
        contacted_hosts: snapshot.contacted_hosts,
        client_wire_bytes,
        subresource_failures: failures,
    })
}

async fn finalize_session(
    control_addr: &str,
    session: &str,
) -> Result<PageSessionSnapshot, HarnessError> {
    let mut head = RequestHead::new("POST", &format!("/session/{session}/finalize"));
    head.headers.push("Host", control_addr);
    head.headers.push("Connection", "close");
    let response = http1::fetch(control_addr, &head)
        .await
        .map_err(|e| HarnessError::Control(e.to_string()))?;
    if response.head.status != 200 {
        return Err(HarnessError::Control(format!(
            "finalize returned {}",
            response.head.status
        )));
    }
    serde_json::from_slice(&response.body).map_err(|e| HarnessError::Control(e.to_string()))
}

/// Medians of the per-fetch metrics for one mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricMedians {
    pub load_time_ms: f64,
    pub bytes: f64,
    pub requests: f64,
    pub cookies: f64,
}

/// Fractional reductions, (unprotected - protected) / unprotected,
/// defined only when the unprotected median is positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reductions {
    pub load_time: Option<f64>,
    pub bytes: Option<f64>,
    pub requests: Option<f64>,
    pub cookies: Option<f64>,
}

/// Protected-vs-unprotected medians for one site.
#[derive(Debug, Clone, Serialize)]
pub struct SiteComparison {
    pub site: String,
    pub reps: u32,
    pub median_protected: MetricMedians,
    pub median_unprotected: MetricMedians,
    /// Median blocked count across protected runs.
    pub trackers_blocked: f64,
    pub reductions: Reductions,
    #[serde(skip)]
    pub protected_reports: Vec<FetchReport>,
    #[serde(skip)]
    pub unprotected_reports: Vec<FetchReport>,
}

/// Median with the even-count convention of averaging the middle two.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("comparable metric"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// The reduction formula used everywhere in reporting.
pub fn reduction(unprotected: f64, protected: f64) -> Option<f64> {
    if unprotected > 0.0 {
        Some((unprotected - protected) / unprotected)
    } else {
        None
    }
}

fn medians_of(reports: &[FetchReport]) -> MetricMedians {
    MetricMedians {
        load_time_ms: median(&reports.iter().map(|r| r.load_time_ms).collect::<Vec<_>>()),
        bytes: median(&reports.iter().map(|r| r.bytes as f64).collect::<Vec<_>>()),
        requests: median(
            &reports
                .iter()
                .map(|r| r.requests as f64)
                .collect::<Vec<_>>(),
        ),
        cookies: median(
            &reports
                .iter()
                .map(|r| r.cookies.len() as f64)
                .collect::<Vec<_>>(),
        ),
    }
}

/// Measure one site `reps` times per mode, interleaved P,U,P,U to cancel
/// drift, and reduce to medians. Fails only when a mode produced no
/// successful fetch at all.
pub async fn compare(
    site: &str,
    reps: u32,
    protected: &ProxyEndpoints,
    unprotected: &ProxyEndpoints,
    opts: &FetchOptions,
) -> Result<SiteComparison, HarnessError> {
    assert!(reps >= 1, "reps must be at least 1");
    let mut protected_reports = Vec::new();
    let mut unprotected_reports = Vec::new();
    let mut last_error = None;
    for _ in 0..reps {
        match fetch_page(site, true, protected, opts).await {
            Ok(report) => protected_reports.push(report),
            Err(e) => last_error = Some(e),
        }
        match fetch_page(site, false, unprotected, opts).await {
            Ok(report) => unprotected_reports.push(report),
            Err(e) => last_error = Some(e),
        }
    }
    if protected_reports.is_empty() || unprotected_reports.is_empty() {
        return Err(last_error.unwrap_or_else(|| HarnessError::SiteUnreachable(site.to_string())));
    }

    let median_protected = medians_of(&protected_reports);
    let median_unprotected = medians_of(&unprotected_reports);
    let trackers_blocked = median(
        &protected_reports
            .iter()
            .map(|r| r.blocked as f64)
            .collect::<Vec<_>>(),
    );
    let reductions = Reductions {
        load_time: reduction(
            median_unprotected.load_time_ms,
            median_protected.load_time_ms,
        ),
        bytes: reduction(median_unprotected.bytes, median_protected.bytes),
        requests: reduction(median_unprotected.requests, median_protected.requests),
        cookies: reduction(median_unprotected.cookies, median_protected.cookies),
    };
    Ok(SiteComparison {
        site: site.to_string(),
        reps,
        median_protected,
        median_unprotected,
        trackers_blocked,
        reductions,
        protected_reports,
        unprotected_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_cookie_identity_and_defaults() {
        let c = parse_set_cookie("id=abc; Max-Age=3600", "t.example", "/a/b.gif").unwrap();
        assert_eq!(c.name, "id");
        assert_eq!(c.domain, "t.example");
        assert_eq!(c.path, "/a");

        let c = parse_set_cookie(
            "sid=1; Domain=.Tracker.Example; Path=/x",
            "sub.tracker.example",
            "/",
        )
        .unwrap();
        assert_eq!(c.domain, "tracker.example");
        assert_eq!(c.path, "/x");

        assert!(parse_set_cookie("dead=1; Max-Age=0", "h", "/").is_none());
        assert!(parse_set_cookie("dead=1; Max-Age=-5", "h", "/").is_none());
        assert!(parse_set_cookie("novalue", "h", "/").is_none());
    }

    #[test]
    fn default_path_follows_rfc6265() {
        assert_eq!(default_cookie_path("/"), "/");
        assert_eq!(default_cookie_path("/a"), "/");
        assert_eq!(default_cookie_path("/a/b.gif"), "/a");
        assert_eq!(default_cookie_path("/a/b/"), "/a/b");
        assert_eq!(default_cookie_path(""), "/");
    }

    fn report_with_cookies(cookies: &[(&str, &str, &str)]) -> FetchReport {
        FetchReport {
            site: "s".into(),
            protected: false,
            load_time_ms: 0.0,
            bytes: 0,
            requests: 0,
            blocked: 0,
            blocked_by_type: BTreeMap::new(),
            cookies: cookies
                .iter()
                .map(|(n, d, p)| CookieKey {
                    name: n.to_string(),
                    domain: d.to_string(),
                    path: p.to_string(),
                })
                .collect(),
            contacted_hosts: BTreeSet::new(),
            client_wire_bytes: 0,
            subresource_failures: 0,
        }
    }

    #[test]
    fn cookie_union_is_store_like() {
        let a = report_with_cookies(&[("id", "t.example", "/"), ("s", "a.example", "/")]);
        let b = report_with_cookies(&[("id", "t.example", "/")]);
        let c = report_with_cookies(&[]);
        assert_eq!(count_cookies([&a, &b, &c]), 2);
        // Order independence.
        assert_eq!(count_cookies([&c, &b, &a]), 2);
        assert_eq!(count_cookies([] as [&FetchReport; 0]), 0);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[1.0, 3.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
    }

    #[test]
    fn reduction_formula_matches_reported_arithmetic() {
        // Request and byte reductions derived from published raw pairs:
        // 98 vs 219 requests and 2.8 vs 4.3 MB.
        let requests = reduction(219.0, 98.0).unwrap();
        assert!((requests * 100.0 - 55.3).abs() < 0.05, "{requests}");
        let bytes = reduction(4.3, 2.8).unwrap();
        assert!((bytes * 100.0 - 34.9).abs() < 0.05, "{bytes}");
        assert_eq!(reduction(0.0, 0.0), None);
    }
}
