//! Minimal HTTP/1.1 plumbing over tokio streams.
//!
//! The proxy has to relay responses byte-for-byte (data-usage accounting
//! counts wire bytes, transfer encoding included) and hold on to bytes a
//! client pipelines after a CONNECT head, so this module keeps explicit
//! control of buffering instead of going through a full HTTP stack. It is
//! deliberately small: request/response heads, the three body framings,
//! and a tiny client.

use std::io;

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::TcpStream;

/// Upper bound on a request or response head.
const MAX_HEAD_BYTES: usize = 64 * 1024;

/// Ordered, duplicate-preserving header list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Headers(pub Vec<(String, String)>);

impl Headers {
    pub fn new() -> Headers {
        Headers(Vec::new())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn all(&self, name: &str) -> Vec<&str> {
        self.0
            .iter()
            .filter(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn push(&mut self, name: &str, value: &str) {
        self.0.push((name.to_string(), value.to_string()));
    }

    pub fn remove(&mut self, name: &str) {
        self.0.retain(|(n, _)| !n.eq_ignore_ascii_case(name));
    }

    pub fn set(&mut self, name: &str, value: &str) {
        self.remove(name);
        self.push(name, value);
    }
}

#[derive(Debug, Clone)]
pub struct RequestHead {
    pub method: String,
    pub target: String,
    pub version: String,
    pub headers: Headers,
}

impl RequestHead {
    pub fn new(method: &str, target: &str) -> RequestHead {
        RequestHead {
            method: method.to_string(),
            target: target.to_string(),
            version: "HTTP/1.1".to_string(),
            headers: Headers::new(),
        }
    }

    /// True when the client asked to close the connection after this
    /// exchange (or speaks HTTP/1.0 without keep-alive).
    pub fn wants_close(&self) -> bool {
        match self.headers.get("Connection") {
            Some(v) if v.eq_ignore_ascii_case("close") => true,
            Some(v) if v.eq_ignore_ascii_case("keep-alive") => false,
            _ => self.version == "HTTP/1.0",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{} {} {}\r\n", self.method, self.target, self.version).into_bytes();
        for (n, v) in &self.headers.0 {
            out.extend_from_slice(format!("{n}: {v}\r\n").as_bytes());
        }
        out.extend_from_slice(b"\r\n");
        out
    }
}

#[derive(Debug, Clone)]
pub struct ResponseHead {
    pub version: String,
    pub status: u16,
    pub reason: String,
    pub headers: Headers,
}

impl ResponseHead {
    pub fn new(status: u16, reason: &str) -> ResponseHead {
        ResponseHead {
            version: "HTTP/1.1".to_string(),
            status,
            reason: reason.to_string(),
            headers: Headers::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{} {} {}\r\n", self.version, self.status, self.reason).into_bytes();
        for (n, v) in &self.headers.0 {
            out.extend_from_slice(format!("{n}: {v}\r\n").as_bytes());
        }
        out.extend_from_slice(b"\r\n");
        out
    }
}

/// How a message body is delimited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyFraming {
    None,
    Length(u64),
    Chunked,
    UntilClose,
}

pub fn request_body_framing(head: &RequestHead) -> BodyFraming {
    if let Some(te) = head.headers.get("Transfer-Encoding") {
        if te.to_ascii_lowercase().contains("chunked") {
            return BodyFraming::Chunked;
        }
    }
    match head
        .headers
        .get("Content-Length")
        .and_then(|v| v.parse().ok())
    {
        Some(0) | None => BodyFraming::None,
        Some(n) => BodyFraming::Length(n),
    }
}

pub fn response_body_framing(request_method: &str, head: &ResponseHead) -> BodyFraming {
    if request_method.eq_ignore_ascii_case("HEAD")
        || head.status / 100 == 1
        || head.status == 204
        || head.status == 304
    {
        return BodyFraming::None;
    }
    if let Some(te) = head.headers.get("Transfer-Encoding") {
        if te.to_ascii_lowercase().contains("chunked") {
            return BodyFraming::Chunked;
        }
    }
    match head
        .headers
        .get("Content-Length")
        .and_then(|v| v.parse().ok())
    {
        Some(n) => BodyFraming::Length(n),
        None => BodyFraming::UntilClose,
    }
}

/// A stream plus explicitly managed read-ahead, so bytes read past a head
/// are never lost to an internal buffer.
#[derive(Debug)]
pub struct NetStream<S> {
    stream: S,
    pending: Vec<u8>,
}

impl NetStream<TcpStream> {
    pub async fn connect(addr: &str) -> io::Result<NetStream<TcpStream>> {
        Ok(NetStream::new(TcpStream::connect(addr).await?))
    }
}

impl<S: AsyncRead + AsyncWrite + Unpin> NetStream<S> {
    pub fn new(stream: S) -> NetStream<S> {
        NetStream {
            stream,
            pending: Vec::new(),
        }
    }

    /// Bytes read past the last consumed message, handed back for
    /// tunneling.
    pub fn take_pending(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.pending)
    }

    pub fn into_inner(self) -> S {
        self.stream
    }

    pub fn inner_mut(&mut self) -> &mut S {
        &mut self.stream
    }

    async fn fill(&mut self) -> io::Result<usize> {
        let mut chunk = [0u8; 8192];
        let n = self.stream.read(&mut chunk).await?;
        self.pending.extend_from_slice(&chunk[..n]);
        Ok(n)
    }

    fn consume(&mut self, n: usize) -> Vec<u8> {
        let rest = self.pending.split_off(n);
        std::mem::replace(&mut self.pending, rest)
    }

    /// Read a full head (through the blank line). `Ok(None)` on a clean
    /// EOF before any byte of a new message.
    pub async fn read_head_raw(&mut self) -> io::Result<Option<Vec<u8>>> {
        loop {
            if let Some(end) = find_head_end(&self.pending) {
                return Ok(Some(self.consume(end)));
            }
            if self.pending.len() > MAX_HEAD_BYTES {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "message head too large",
                ));
            }
            if self.fill().await? == 0 {
                if self.pending.is_empty() {
                    return Ok(None);
                }
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "connection closed mid-head",
                ));
            }
        }
    }

    pub async fn read_request(&mut self) -> io::Result<Option<RequestHead>> {
        match self.read_head_raw().await? {
            Some(raw) => Ok(Some(parse_request_head(&raw)?)),
            None => Ok(None),
        }
    }

    pub async fn read_response(&mut self) -> io::Result<(ResponseHead, Vec<u8>)> {
        let raw = self
            .read_head_raw()
            .await?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "no response received"))?;
        Ok((parse_response_head(&raw)?, raw))
    }

    /// Read exactly `n` body bytes (buffered read-ahead first).
    pub async fn read_exact_body(&mut self, n: usize) -> io::Result<Vec<u8>> {
        while self.pending.len() < n {
            if self.fill().await? == 0 {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "connection closed mid-body",
                ));
            }
        }
        Ok(self.consume(n))
    }

    /// Read until EOF.
    pub async fn read_to_close(&mut self) -> io::Result<Vec<u8>> {
        while self.fill().await? > 0 {}
        Ok(self.take_pending())
    }

    /// Read one CRLF-terminated line (chunk-size lines, trailers).
    async fn read_line(&mut self) -> io::Result<Vec<u8>> {
        loop {
            if let Some(pos) = self.pending.iter().position(|&b| b == b'\n') {
                return Ok(self.consume(pos + 1));
            }
            if self.pending.len() > MAX_HEAD_BYTES {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "line too long"));
            }
            if self.fill().await? == 0 {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    "connection closed mid-line",
                ));
            }
        }
    }

    /// Read a whole body per its framing, decoded (chunked bodies come
    /// back de-chunked). Returns (decoded body, wire bytes consumed).
    pub async fn read_body(&mut self, framing: BodyFraming) -> io::Result<(Vec<u8>, u64)> {
        match framing {
            BodyFraming::None => Ok((Vec::new(), 0)),
            BodyFraming::Length(n) => {
                let body = self.read_exact_body(n as usize).await?;
                let wire = body.len() as u64;
                Ok((body, wire))
            }
            BodyFraming::UntilClose => {
                let body = self.read_to_close().await?;
                let wire = body.len() as u64;
                Ok((body, wire))
            }
            BodyFraming::Chunked => {
                let mut body = Vec::new();
                let mut wire = 0u64;
                loop {
                    let line = self.read_line().await?;
                    wire += line.len() as u64;
                    let size = parse_chunk_size(&line)?;
                    if size == 0 {
                        // Trailers through the final blank line.
                        loop {
                            let trailer = self.read_line().await?;
                            wire += trailer.len() as u64;
                            if trailer == b"\r\n" || trailer == b"\n" {
                                break;
                            }
                        }
                        return Ok((body, wire));
                    }
                    let chunk = self.read_exact_body(size + 2).await?;
                    wire += chunk.len() as u64;
                    body.extend_from_slice(&chunk[..size]);
                }
            }
        }
    }

    /// Relay a body to `sink` without decoding, counting wire bytes.
    pub async fn relay_body<W: AsyncWrite + Unpin>(
        &mut self,
        framing: BodyFraming,
        sink: &mut W,
    ) -> io::Result<u64> {
        match framing {
            BodyFraming::None => Ok(0),
            BodyFraming::Length(n) => {
                let mut remaining = n;
                let mut relayed = 0u64;
                while remaining > 0 {
                    if self.pending.is_empty() && self.fill().await? == 0 {
                        return Err(io::Error::new(
                            io::ErrorKind::UnexpectedEof,
                            "connection closed mid-body",
                        ));
                    }
                    let take = self.pending.len().min(remaining as usize);
                    let chunk = self.consume(take);
                    sink.write_all(&chunk).await?;
                    relayed += take as u64;
                    remaining -= take as u64;
                }
                Ok(relayed)
            }
            BodyFraming::UntilClose => {
                let mut relayed = 0u64;
                loop {
                    if self.pending.is_empty() && self.fill().await? == 0 {
                        return Ok(relayed);
                    }
                    let chunk = self.take_pending();
                    sink.write_all(&chunk).await?;
                    relayed += chunk.len() as u64;
                }
            }
            BodyFraming::Chunked => {
                let mut relayed = 0u64;
                loop {
                    let line = self.read_line().await?;
                    sink.write_all(&line).await?;
                    relayed += line.len() as u64;
                    let size = parse_chunk_size(&line)?;
                    if size == 0 {
                        loop {
                            let trailer = self.read_line().await?;
                            sink.write_all(&trailer).await?;
                            relayed += trailer.len() as u64;
                            if trailer == b"\r\n" || trailer == b"\n" {
                                return Ok(relayed);
                            }
                        }
                    }
                    let chunk = self.read_exact_body(size + 2).await?;
                    sink.write_all(&chunk).await?;
                    relayed += chunk.len() as u64;
                }
            }
        }
    }

    pub async fn write_all(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes).await
    }

    /// Write a complete response with a sized body.
    pub async fn write_response(
        &mut self,
        status: u16,
        reason: &str,
        headers: &[(&str, &str)],
        body: &[u8],
    ) -> io::Result<()> {
        let mut head = ResponseHead::new(status, reason);
        for (n, v) in headers {
            head.headers.push(n, v);
        }
        head.headers.set("Content-Length", &body.len().to_string());
        let mut bytes = head.encode();
        bytes.extend_from_slice(body);
        self.write_all(&bytes).await
    }
}

fn find_head_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4)
        .position(|w| w == b"\r\n\r\n")
        .map(|i| i + 4)
        .or_else(|| buf.windows(2).position(|w| w == b"\n\n").map(|i| i + 2))
}

fn parse_chunk_size(line: &[u8]) -> io::Result<usize> {
    let text = std::str::from_utf8(line)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad chunk size"))?
        .trim();
    let size_part = text.split(';').next().unwrap_or("");
    usize::from_str_radix(size_part, 16)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad chunk size"))
}

fn parse_head_lines(raw: &[u8]) -> io::Result<Vec<String>> {
    let text = String::from_utf8_lossy(raw);
    Ok(text
        .split("\r\n")
        .flat_map(|part| part.split('\n'))
        .map(str::to_string)
        .collect())
}

fn parse_headers(lines: &[String]) -> Headers {
    let mut headers = Headers::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(colon) = line.find(':') {
            headers.push(line[..colon].trim(), line[colon + 1..].trim());
        }
    }
    headers
}

pub fn parse_request_head(raw: &[u8]) -> io::Result<RequestHead> {
    let lines = parse_head_lines(raw)?;
    let mut parts = lines
        .first()
        .map(|l| l.split_whitespace())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty request"))?;
    let method = parts
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "missing method"))?;
    let target = parts
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "missing target"))?;
    let version = parts.next().unwrap_or("HTTP/1.1");
    Ok(RequestHead {
        method: method.to_string(),
        target: target.to_string(),
        version: version.to_string(),
        headers: parse_headers(&lines[1..]),
    })
}

pub fn parse_response_head(raw: &[u8]) -> io::Result<ResponseHead> {
    let lines = parse_head_lines(raw)?;
    let status_line = lines
        .first()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "empty response"))?;
    let mut parts = status_line.splitn(3, ' ');
    let version = parts
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "missing version"))?;
    let status: u16 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "missing status"))?;
    let reason = parts.next().unwrap_or("").to_string();
    Ok(ResponseHead {
        version: version.to_string(),
        status,
        reason,
        headers: parse_headers(&lines[1..]),
    })
}

/// A complete client-side response.
#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub head: ResponseHead,
    pub body: Vec<u8>,
    /// Raw bytes received: head plus body as framed on the wire.
    pub wire_bytes: u64,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.head.headers.get(name)
    }
}

/// One-shot GET: connect to `addr`, send `head`, read the full response.
/// `target` inside `head` may be origin-form or absolute-form (for
/// requests through a proxy).
pub async fn fetch(addr: &str, head: &RequestHead) -> io::Result<HttpResponse> {
    let mut conn = NetStream::connect(addr).await?;
    conn.write_all(&head.encode()).await?;
    read_full_response(&mut conn, &head.method).await
}

pub async fn read_full_response<S: AsyncRead + AsyncWrite + Unpin>(
    conn: &mut NetStream<S>,
    method: &str,
) -> io::Result<HttpResponse> {
    let (parsed, raw) = conn.read_response().await?;
    let framing = response_body_framing(method, &parsed);
    let (body, body_wire) = conn.read_body(framing).await?;
    Ok(HttpResponse {
        head: parsed,
        body,
        wire_bytes: raw.len() as u64 + body_wire,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::io::duplex;

    #[tokio::test]
    async fn parses_request_head_and_keepalive() {
        let raw = b"GET http://h.example/a HTTP/1.1\r\nHost: h.example\r\nX-TP-Session: s1\r\n\r\n";
        let head = parse_request_head(&raw[..raw.len() - 2]).unwrap();
        assert_eq!(head.method, "GET");
        assert_eq!(head.target, "http://h.example/a");
        assert_eq!(head.headers.get("host"), Some("h.example"));
        assert_eq!(head.headers.get("X-TP-SESSION"), Some("s1"));
        assert!(!head.wants_close());

        let raw = b"GET / HTTP/1.0\r\n\r\n";
        assert!(parse_request_head(raw).unwrap().wants_close());
    }

    #[tokio::test]
    async fn reads_sequential_requests() {
        let (client, server) = duplex(4096);
        let mut server = NetStream::new(server);
        let mut client = NetStream::new(client);
        client
            .write_all(b"GET /a HTTP/1.1\r\n\r\nGET /b HTTP/1.1\r\n\r\n")
            .await
            .unwrap();
        drop(client);
        let a = server.read_request().await.unwrap().unwrap();
        let b = server.read_request().await.unwrap().unwrap();
        assert_eq!(a.target, "/a");
        assert_eq!(b.target, "/b");
        assert!(server.read_request().await.unwrap().is_none());
    }

    #[tokio::test]
    async fn content_length_body_round_trip() {
        let (client, server) = duplex(4096);
        let mut server = NetStream::new(server);
        let mut client = NetStream::new(client);
        tokio::spawn(async move {
            server
                .write_response(200, "OK", &[("X-T", "1")], b"hello body")
                .await
                .unwrap();
        });
        let resp = read_full_response(&mut client, "GET").await.unwrap();
        assert_eq!(resp.head.status, 200);
        assert_eq!(resp.body, b"hello body");
        assert_eq!(resp.header("x-t"), Some("1"));
        // Wire bytes = head + body.
        assert!(resp.wire_bytes > 10);
    }

    #[tokio::test]
    async fn chunked_body_decoded_and_counted() {
        let (client, server) = duplex(4096);
        let mut server = NetStream::new(server);
        let mut client = NetStream::new(client);
        tokio::spawn(async move {
            server
                .write_all(
                    b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n\
                      5\r\nhello\r\n6\r\n world\r\n0\r\n\r\n",
                )
                .await
                .unwrap();
        });
        let resp = read_full_response(&mut client, "GET").await.unwrap();
        assert_eq!(resp.body, b"hello world");
        let head_len = "HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n".len() as u64;
        let chunk_wire = "5\r\nhello\r\n6\r\n world\r\n0\r\n\r\n".len() as u64;
        assert_eq!(resp.wire_bytes, head_len + chunk_wire);
    }

    #[tokio::test]
    async fn relay_chunked_preserves_wire_bytes() {
        let (client, server) = duplex(4096);
        let mut from = NetStream::new(server);
        let mut client = NetStream::new(client);
        let payload = b"4\r\nwire\r\n0\r\n\r\n";
        client.write_all(payload).await.unwrap();
        let mut sink = Vec::new();
        let n = from
            .relay_body(BodyFraming::Chunked, &mut sink)
            .await
            .unwrap();
        assert_eq!(n, payload.len() as u64);
        assert_eq!(sink, payload);
    }

    #[tokio::test]
    async fn pending_bytes_survive_head_read() {
        let (client, server) = duplex(4096);
        let mut server = NetStream::new(server);
        let mut client = NetStream::new(client);
        client
            .write_all(b"CONNECT h:443 HTTP/1.1\r\n\r\n\x16\x03tls-bytes")
            .await
            .unwrap();
        let head = server.read_request().await.unwrap().unwrap();
        assert_eq!(head.method, "CONNECT");
        assert_eq!(server.take_pending(), b"\x16\x03tls-bytes");
    }

    #[tokio::test]
    async fn oversized_head_rejected() {
        let (client, server) = duplex(1 << 20);
        let mut server = NetStream::new(server);
        let mut client = NetStream::new(client);
        let big = vec![b'a'; MAX_HEAD_BYTES + 1024];
        client.write_all(b"GET /").await.unwrap();
        client.write_all(&big).await.unwrap();
        drop(client);
        assert!(server.read_request().await.is_err());
    }
}
