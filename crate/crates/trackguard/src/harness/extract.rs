//! Subresource extraction from HTML.
//!
//! A tolerant tag-level scan (no DOM, no script execution) that pulls
//! the element classes a page loads directly: `script[src]`, `img[src]`,
//! `iframe[src]`, `object[data]`, `link[rel=stylesheet][href]`. Counts
//! derived from this are a lower bound: dynamically injected resources
//! are invisible to a fetcher.

use std::collections::HashSet;

use crate::canonical::CanonicalUrl;
use crate::policy::ElementHint;

/// Extract subresource references in document order, resolved against
/// `base`, deduplicated by (element kind, URL). Only http/https targets
/// are returned; data:, javascript: and fragment-only references are
/// dropped.
pub fn extract_subresources(html: &str, base: &CanonicalUrl) -> Vec<(ElementHint, String)> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for tag in scan_tags(html) {
        let (hint, attr) = match tag.name.as_str() {
            "script" => (ElementHint::Script, "src"),
            "img" => (ElementHint::Img, "src"),
            "iframe" => (ElementHint::Iframe, "src"),
            "object" => (ElementHint::Object, "data"),
            "link" => {
                let rel = tag.attr("rel").unwrap_or_default();
                if !rel
                    .split_ascii_whitespace()
                    .any(|r| r.eq_ignore_ascii_case("stylesheet"))
                {
                    continue;
                }
                (ElementHint::Stylesheet, "href")
            }
            _ => continue,
        };
        let Some(reference) = tag.attr(attr) else {
            continue;
        };
        let Some(url) = resolve_reference(&reference, base) else {
            continue;
        };
        if seen.insert((hint, url.clone())) {
            out.push((hint, url));
        }
    }
    out
}

struct Tag {
    name: String,
    attrs: Vec<(String, String)>,
}

impl Tag {
    fn attr(&self, name: &str) -> Option<String> {
        self.attrs
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.clone())
    }
}

/// Scan for start tags, skipping comments, closing tags and declarations.
fn scan_tags(html: &str) -> Vec<Tag> {
    let bytes = html.as_bytes();
    let mut tags = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        if html[i..].starts_with("<!--") {
            i = html[i..]
                .find("-->")
                .map(|p| i + p + 3)
                .unwrap_or(bytes.len());
            continue;
        }
        if i + 1 < bytes.len() && (bytes[i + 1] == b'/' || bytes[i + 1] == b'!') {
            i = html[i..]
                .find('>')
                .map(|p| i + p + 1)
                .unwrap_or(bytes.len());
            continue;
        }
        let end = match html[i..].find('>') {
            Some(p) => i + p,
            None => break,
        };
        if let Some(tag) = parse_tag(&html[i + 1..end]) {
            tags.push(tag);
        }
        i = end + 1;
    }
    tags
}

fn parse_tag(inner: &str) -> Option<Tag> {
    let inner = inner.trim_end_matches('/').trim();
    let mut chars = inner.char_indices().peekable();
    let mut name_end = inner.len();
    for (idx, c) in chars.by_ref() {
        if c.is_ascii_whitespace() {
            name_end = idx;
            break;
        }
    }
    let name = inner[..name_end].to_ascii_lowercase();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric()) {
        return None;
    }
    Some(Tag {
        name,
        attrs: parse_attrs(&inner[name_end..]),
    })
}

fn parse_attrs(text: &str) -> Vec<(String, String)> {
    let bytes = text.as_bytes();
    let mut attrs = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'/') {
            i += 1;
        }
        if i >= bytes.len() {
            break;
        }
        let name_start = i;
        while i < bytes.len() && bytes[i] != b'=' && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let name = text[name_start..i].to_ascii_lowercase();
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= bytes.len() || bytes[i] != b'=' {
            if !name.is_empty() {
                attrs.push((name, String::new()));
            }
            continue;
        }
        i += 1; // past '='
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let value = if i < bytes.len() && (bytes[i] == b'"' || bytes[i] == b'\'') {
            let quote = bytes[i];
            i += 1;
            let start = i;
            while i < bytes.len() && bytes[i] != quote {
                i += 1;
            }
            let v = text[start..i].to_string();
            i += 1; // past closing quote
            v
        } else {
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            text[start..i].to_string()
        };
        if !name.is_empty() {
            attrs.push((name, value));
        }
    }
    attrs
}

/// Resolve an HTML URL reference against the page URL. Handles absolute,
/// protocol-relative, absolute-path, relative-path, and query-only forms.
fn resolve_reference(reference: &str, base: &CanonicalUrl) -> Option<String> {
    let reference = reference.trim();
    if reference.is_empty() || reference.starts_with('#') {
        return None;
    }
    let lower = reference.to_ascii_lowercase();
    if lower.starts_with("http://") || lower.starts_with("https://") {
        return Some(reference.to_string());
    }
    // Some other scheme (data:, javascript:, ftp:): not a network
    // subresource we can fetch. A reference has a scheme when a colon
    // appears before any "/", "?" or "#".
    if let Some(i) = reference.find([':', '/', '?', '#']) {
        if reference.as_bytes()[i] == b':'
            && i > 0
            && reference.as_bytes()[0].is_ascii_alphabetic()
            && reference[..i]
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'))
        {
            return None;
        }
    }
    let authority = match base.port {
        Some(p) => format!("{}:{}", base.host, p),
        None => base.host.clone(),
    };
    if let Some(rest) = reference.strip_prefix("//") {
        return Some(format!("{}://{}", base.scheme, rest));
    }
    if reference.starts_with('/') {
        return Some(format!("{}://{}{}", base.scheme, authority, reference));
    }
    if let Some(query) = reference.strip_prefix('?') {
        return Some(format!(
            "{}://{}{}?{}",
            base.scheme, authority, base.path, query
        ));
    }
    // Relative path: splice onto the base directory; the canonicalizer
    // resolves any dot segments at fetch time.
    let dir = match base.path.rfind('/') {
        Some(i) => &base.path[..=i],
        None => "/",
    };
    Some(format!(
        "{}://{}{}{}",
        base.scheme, authority, dir, reference
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::parse_and_canonicalize;

    fn base(url: &str) -> CanonicalUrl {
        parse_and_canonicalize(url).unwrap()
    }

    #[test]
    fn extracts_script_src() {
        let got = extract_subresources("<script src='/a.js'></script>", &base("http://s.example/"));
        assert_eq!(
            got,
            vec![(ElementHint::Script, "http://s.example/a.js".to_string())]
        );
    }

    #[test]
    fn extracts_element_mix_in_order() {
        let html = r#"
            <html><head>
            <script src="http://t.example/a.js"></script>
            <link rel="stylesheet" href="/style.css">
            <script src="http://t.example/b.js"></script>
            </head><body>
            <img src="http://t.example/p.gif">
            <iframe src="http://t.example/frame"></iframe>
            <object data="http://t.example/flash"></object>
            </body></html>"#;
        let got = extract_subresources(html, &base("http://s.example/page/index.html"));
        let hints: Vec<ElementHint> = got.iter().map(|(h, _)| *h).collect();
        assert_eq!(
            hints,
            vec![
                ElementHint::Script,
                ElementHint::Stylesheet,
                ElementHint::Script,
                ElementHint::Img,
                ElementHint::Iframe,
                ElementHint::Object,
            ]
        );
        assert_eq!(got[1].1, "http://s.example/style.css");
    }

    #[test]
    fn protocol_relative_inherits_page_scheme() {
        let got = extract_subresources("<img src='//t.example/p.gif'>", &base("http://s.example/"));
        assert_eq!(
            got,
            vec![(ElementHint::Img, "http://t.example/p.gif".to_string())]
        );
        let got =
            extract_subresources("<img src='//t.example/p.gif'>", &base("https://s.example/"));
        assert_eq!(got[0].1, "https://t.example/p.gif");
    }

    #[test]
    fn relative_paths_resolve_against_directory() {
        let got = extract_subresources(
            "<script src='lib/x.js'></script>",
            &base("http://s.example/app/index.html"),
        );
        assert_eq!(got[0].1, "http://s.example/app/lib/x.js");
    }

    #[test]
    fn duplicates_collapse() {
        let html = "<img src='/p.gif'><img src='/p.gif'><script src='/p.gif'></script>";
        let got = extract_subresources(html, &base("http://s.example/"));
        // Same URL under two element kinds stays distinct.
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn non_network_references_skipped() {
        let html = r##"
            <img src="data:image/gif;base64,R0lGOD">
            <script src="javascript:void(0)"></script>
            <img src="#top">
            <img src="">
            <link rel="preload" href="/ignored.js">
            <img>
        "##;
        let got = extract_subresources(html, &base("http://s.example/"));
        assert!(got.is_empty(), "{got:?}");
    }

    #[test]
    fn malformed_html_best_effort() {
        let html = "<script src='/a.js'><img src='/b.gif' <broken <!-- <img src='/c.gif'> -->
                    <IMG SRC=\"/d.gif\">";
        let got = extract_subresources(html, &base("http://s.example/"));
        let urls: Vec<&str> = got.iter().map(|(_, u)| u.as_str()).collect();
        assert!(urls.contains(&"http://s.example/a.js"));
        assert!(urls.contains(&"http://s.example/d.gif"));
        // Commented-out image is not a subresource.
        assert!(!urls.contains(&"http://s.example/c.gif"));
    }

    #[test]
    fn fixture_page_round_trips_through_extractor() {
        let site = crate::fixture::SiteSpec {
            host: "news.example".into(),
            page_bytes: 4096,
            page_latency_ms: 0,
            page_set_cookie: vec![],
            elements: vec![
                crate::fixture::ElementSpec {
                    kind: ElementHint::Script,
                    host: "t1.example".into(),
                    path: "/a.js".into(),
                    bytes: 10,
                    latency_ms: 0,
                    set_cookie: vec![],
                },
                crate::fixture::ElementSpec {
                    kind: ElementHint::Img,
                    host: "t2.example".into(),
                    path: "/p.gif".into(),
                    bytes: 10,
                    latency_ms: 0,
                    set_cookie: vec![],
                },
            ],
        };
        let html = crate::fixture::page_html(&site);
        let got = extract_subresources(&html, &base("http://news.example/"));
        assert_eq!(
            got,
            vec![
                (ElementHint::Script, "http://t1.example/a.js".to_string()),
                (ElementHint::Img, "http://t2.example/p.gif".to_string()),
            ]
        );
    }
}
