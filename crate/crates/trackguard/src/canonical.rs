//! URL canonicalization and lookup-expression expansion.
//!
//! Raw URLs are normalized into a [`CanonicalUrl`] and expanded into the
//! host-suffix/path-prefix expressions that get hashed and checked against
//! the blocklist. Canonicalization is deliberately pinned down to the byte:
//! two processes must derive identical expressions (and therefore identical
//! hashes) for the same input URL.

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

/// Most host suffixes considered per lookup (exact host included).
const MAX_HOST_SUFFIXES: usize = 5;

/// Most path prefixes considered per lookup.
const MAX_PATH_PREFIXES: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MalformedUrl {
    #[error("unsupported scheme: {0:?}")]
    UnsupportedScheme(String),
    #[error("empty or invalid host")]
    InvalidHost,
    #[error("invalid port")]
    InvalidPort,
    #[error("unparseable URL")]
    Unparseable,
}

/// URL scheme accepted for classification. Tracking lists concern HTTP
/// traffic, so everything else is rejected up front.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Http,
    Https,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Http => "http",
            Scheme::Https => "https",
        }
    }

    pub fn default_port(&self) -> u16 {
        match self {
            Scheme::Http => 80,
            Scheme::Https => 443,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A normalized URL: the form every match runs against.
///
/// Invariants upheld by construction:
/// - `host` is lowercase ASCII with no trailing dot and no consecutive dots
/// - `path` starts with "/" and contains no "." or ".." segments
/// - percent-escapes in `host`, `path` and `query` are at decode fixpoint
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalUrl {
    pub scheme: Scheme,
    pub host: String,
    /// Non-default port only; scheme-default ports are elided.
    pub port: Option<u16>,
    pub path: String,
    /// Query string without the leading "?".
    pub query: Option<String>,
}

impl CanonicalUrl {
    /// Port requests are actually sent to.
    pub fn effective_port(&self) -> u16 {
        self.port.unwrap_or_else(|| self.scheme.default_port())
    }

    /// Reassemble the canonical URL string.
    pub fn render(&self) -> String {
        let mut out = format!("{}://{}", self.scheme, self.host);
        if let Some(p) = self.port {
            out.push(':');
            out.push_str(&p.to_string());
        }
        out.push_str(&self.path);
        if let Some(q) = &self.query {
            out.push('?');
            out.push_str(q);
        }
        out
    }
}

impl fmt::Display for CanonicalUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// A host-suffix/path-prefix string, the unit hashed for blocklist lookup.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LookupExpression(pub String);

impl LookupExpression {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LookupExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Parse a raw URL string and normalize it.
///
/// Steps, in order: strip the fragment, drop embedded tab/CR/LF, percent-
/// decode the remaining string repeatedly until a fixpoint, split into
/// scheme/host/port/path/query, then normalize each part (host lowercased
/// with dot cleanup, path dot-segments resolved, bytes outside the
/// printable-safe range re-escaped).
pub fn parse_and_canonicalize(raw: &str) -> Result<CanonicalUrl, MalformedUrl> {
    if raw.is_empty() {
        return Err(MalformedUrl::Unparseable);
    }
    let trimmed = raw.trim_matches(|c: char| c == ' ' || c.is_ascii_control());
    // Fragment goes first, before any decoding: a "#" that only appears
    // after decoding is content, not a fragment delimiter.
    let without_fragment = match trimmed.find('#') {
        Some(i) => &trimmed[..i],
        None => trimmed,
    };
    let stripped: String = without_fragment
        .chars()
        .filter(|&c| c != '\t' && c != '\r' && c != '\n')
        .collect();
    let decoded = decode_to_fixpoint(stripped.as_bytes());

    // Scheme.
    let scheme_end = match find_scheme_separator(&decoded) {
        Some(i) => i,
        None => return Err(MalformedUrl::Unparseable),
    };
    let scheme = match decoded[..scheme_end].to_ascii_lowercase().as_slice() {
        b"http" => Scheme::Http,
        b"https" => Scheme::Https,
        other => {
            return Err(MalformedUrl::UnsupportedScheme(
                String::from_utf8_lossy(other).into_owned(),
            ))
        }
    };
    let rest = &decoded[scheme_end + 3..]; // past "://"

    // Authority ends at the first "/" or "?".
    let authority_end = rest
        .iter()
        .position(|&b| b == b'/' || b == b'?')
        .unwrap_or(rest.len());
    let authority = &rest[..authority_end];
    let after_authority = &rest[authority_end..];

    // Userinfo is dropped; it never participates in matching.
    let hostport = match authority.iter().rposition(|&b| b == b'@') {
        Some(i) => &authority[i + 1..],
        None => authority,
    };
    let (host_bytes, port) = split_port(hostport)?;
    let host = canonicalize_host(host_bytes)?;
    let port = match port {
        Some(p) if p == scheme.default_port() => None,
        p => p,
    };

    // Path and query.
    let (raw_path, raw_query) = match after_authority.iter().position(|&b| b == b'?') {
        Some(i) => (&after_authority[..i], Some(&after_authority[i + 1..])),
        None => (after_authority, None),
    };
    let path = escape_bytes(&resolve_dot_segments(raw_path));
    let query = raw_query.map(escape_bytes);

    Ok(CanonicalUrl {
        scheme,
        host,
        port,
        path,
        query,
    })
}

/// The exact host plus its dot-boundary suffixes, most-specific first.
///
/// Suffixes are drawn from the last five labels and must keep at least two
/// labels; IP literals expand to themselves only. At most five entries.
pub fn host_suffixes(host: &str) -> Vec<String> {
    if is_ip_literal(host) {
        return vec![host.to_string()];
    }
    let labels: Vec<&str> = host.split('.').collect();
    let mut out = vec![host.to_string()];
    let window_start = labels.len().saturating_sub(MAX_HOST_SUFFIXES);
    for start in window_start..labels.len() {
        if labels.len() - start < 2 {
            break;
        }
        let suffix = labels[start..].join(".");
        if !out.contains(&suffix) {
            out.push(suffix);
        }
    }
    out
}

/// The exact path (with and without query), "/" and parent directory
/// prefixes, most-specific first, capped at six entries. "/" always
/// survives the cap so domain-scoped entries can match any URL.
pub fn path_prefixes(path: &str, query: Option<&str>) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(q) = query {
        out.push(format!("{path}?{q}"));
    }
    if !out.contains(&path.to_string()) {
        out.push(path.to_string());
    }
    // Parent directories, deepest first, then the root.
    let mut dirs = Vec::new();
    let bytes = path.as_bytes();
    for i in (1..bytes.len()).rev() {
        if bytes[i] == b'/' {
            let dir = &path[..=i];
            if dir != path {
                dirs.push(dir.to_string());
            }
        }
    }
    for d in dirs {
        if !out.contains(&d) {
            out.push(d);
        }
    }
    if !out.contains(&"/".to_string()) {
        out.push("/".to_string());
    }
    // Trim the shallowest directories first, never the root.
    while out.len() > MAX_PATH_PREFIXES {
        out.remove(out.len() - 2);
    }
    out
}

/// All host-suffix × path-prefix combinations for a URL, most-specific
/// first. Between 1 and 30 expressions; always includes `<exact host>/`.
pub fn lookup_expressions(u: &CanonicalUrl) -> Vec<LookupExpression> {
    let hosts = host_suffixes(&u.host);
    let paths = path_prefixes(&u.path, u.query.as_deref());
    let mut out = Vec::with_capacity(hosts.len() * paths.len());
    for h in &hosts {
        for p in &paths {
            out.push(LookupExpression(format!("{h}{p}")));
        }
    }
    out
}

/// Host-only expression set used for CONNECT classification, where no path
/// is visible: every host suffix paired with "/".
pub fn host_expressions(host: &str) -> Vec<LookupExpression> {
    host_suffixes(host)
        .into_iter()
        .map(|h| LookupExpression(format!("{h}/")))
        .collect()
}

/// Validate and normalize a bare hostname (used by list ingestion).
pub fn canonicalize_host_str(host: &str) -> Result<String, MalformedUrl> {
    canonicalize_host(decode_to_fixpoint(host.as_bytes()).as_slice())
}

fn find_scheme_separator(bytes: &[u8]) -> Option<usize> {
    // "<scheme>://" with scheme = ALPHA *(ALPHA / DIGIT / "+" / "-" / ".")
    let colon = bytes.iter().position(|&b| b == b':')?;
    if colon == 0 || bytes.len() < colon + 3 || &bytes[colon + 1..colon + 3] != b"//" {
        return None;
    }
    if !bytes[0].is_ascii_alphabetic() {
        return None;
    }
    if bytes[1..colon]
        .iter()
        .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'+' | b'-' | b'.'))
    {
        Some(colon)
    } else {
        None
    }
}

fn split_port(hostport: &[u8]) -> Result<(&[u8], Option<u16>), MalformedUrl> {
    if hostport.first() == Some(&b'[') {
        // Bracketed IPv6 literal, optionally followed by :port.
        let close = hostport
            .iter()
            .position(|&b| b == b']')
            .ok_or(MalformedUrl::InvalidHost)?;
        let host = &hostport[..=close];
        let rest = &hostport[close + 1..];
        if rest.is_empty() {
            return Ok((host, None));
        }
        if rest[0] != b':' {
            return Err(MalformedUrl::InvalidPort);
        }
        return Ok((host, Some(parse_port(&rest[1..])?)));
    }
    match hostport.iter().rposition(|&b| b == b':') {
        Some(i) => Ok((&hostport[..i], Some(parse_port(&hostport[i + 1..])?))),
        None => Ok((hostport, None)),
    }
}

fn parse_port(bytes: &[u8]) -> Result<u16, MalformedUrl> {
    if bytes.is_empty() || bytes.len() > 5 || !bytes.iter().all(u8::is_ascii_digit) {
        return Err(MalformedUrl::InvalidPort);
    }
    std::str::from_utf8(bytes)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(MalformedUrl::InvalidPort)
}

fn canonicalize_host(bytes: &[u8]) -> Result<String, MalformedUrl> {
    if bytes.is_empty() {
        return Err(MalformedUrl::InvalidHost);
    }
    if bytes.first() == Some(&b'[') {
        return canonicalize_ipv6(bytes);
    }
    let mut host = String::with_capacity(bytes.len());
    let mut prev_dot = true; // collapses leading dots too
    for &b in bytes {
        let c = b.to_ascii_lowercase();
        match c {
            b'.' => {
                if !prev_dot {
                    host.push('.');
                }
                prev_dot = true;
            }
            b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' => {
                host.push(c as char);
                prev_dot = false;
            }
            // Raw non-ASCII hosts are rejected; IDN is expected in
            // punycode form already so hashing stays bit-exact.
            _ => return Err(MalformedUrl::InvalidHost),
        }
    }
    while host.ends_with('.') {
        host.pop();
    }
    if host.is_empty() {
        return Err(MalformedUrl::InvalidHost);
    }
    // Normalize dotted-quad IPv4 through the standard parser.
    if let Ok(ip) = host.parse::<Ipv4Addr>() {
        return Ok(ip.to_string());
    }
    Ok(host)
}

fn canonicalize_ipv6(bytes: &[u8]) -> Result<String, MalformedUrl> {
    if bytes.len() < 3 || bytes.last() != Some(&b']') {
        return Err(MalformedUrl::InvalidHost);
    }
    let inner =
        std::str::from_utf8(&bytes[1..bytes.len() - 1]).map_err(|_| MalformedUrl::InvalidHost)?;
    let addr: std::net::Ipv6Addr = inner.parse().map_err(|_| MalformedUrl::InvalidHost)?;
    Ok(format!("[{addr}]"))
}

pub(crate) fn is_ip_literal(host: &str) -> bool {
    host.parse::<Ipv4Addr>().is_ok() || (host.starts_with('[') && host.ends_with(']'))
}

/// Percent-decode repeatedly until the string stops changing. Invalid
/// escapes (a "%" not followed by two hex digits) pass through untouched.
fn decode_to_fixpoint(bytes: &[u8]) -> Vec<u8> {
    let mut current = bytes.to_vec();
    loop {
        let decoded = decode_once(&current);
        if decoded == current {
            return current;
        }
        current = decoded;
    }
}

fn decode_once(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() {
            let (h, l) = (hex_val(bytes[i + 1]), hex_val(bytes[i + 2]));
            if let (Some(h), Some(l)) = (h, l) {
                out.push(h * 16 + l);
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    out
}

fn hex_val(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'a'..=b'f' => Some(b - b'a' + 10),
        b'A'..=b'F' => Some(b - b'A' + 10),
        _ => None,
    }
}

/// Re-escape bytes outside the printable-safe set. The escape set is fixed
/// (≤ 0x20, ≥ 0x7F, "#", "%") so hashes agree across implementations.
fn escape_bytes(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        if b <= 0x20 || b >= 0x7f || b == b'#' || b == b'%' {
            out.push_str(&format!("%{b:02x}"));
        } else {
            out.push(b as char);
        }
    }
    out
}

/// RFC 3986-style dot-segment removal plus slash-run collapsing. Always
/// yields an absolute path.
fn resolve_dot_segments(path: &[u8]) -> Vec<u8> {
    let mut segments: Vec<&[u8]> = Vec::new();
    let mut trailing_slash = path.is_empty();
    let mut iter = path.split(|&b| b == b'/').peekable();
    while let Some(seg) = iter.next() {
        let last = iter.peek().is_none();
        match seg {
            b"" | b"." => {
                if last {
                    trailing_slash = true;
                }
            }
            b".." => {
                segments.pop();
                if last {
                    trailing_slash = true;
                }
            }
            s => {
                segments.push(s);
                if last {
                    trailing_slash = false;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(path.len() + 1);
    for seg in &segments {
        out.push(b'/');
        out.extend_from_slice(seg);
    }
    if out.is_empty() || trailing_slash {
        out.push(b'/');
    }
    out
}
