//! Public Suffix List lookup.
//!
//! Determines the registrable domain (public suffix plus one label) used
//! to scope per-site overrides and to separate first-party from
//! third-party hosts. The list is a bundled snapshot in the standard text
//! format; there is no live dependency in the decision path.

use std::collections::HashMap;
use std::path::Path;

use crate::canonical;

const BUNDLED: &str = include_str!("../data/public_suffix_list.dat");

const NORMAL: u8 = 1;
const WILDCARD: u8 = 2;
const EXCEPTION: u8 = 4;

/// Parsed suffix rules, keyed by the rule's labels joined with ".".
/// A key can carry several rule kinds ("foo" and "*.foo" both store
/// under "foo"), so kinds are bit flags.
#[derive(Debug, Clone)]
pub struct PublicSuffixList {
    rules: HashMap<String, u8>,
}

impl PublicSuffixList {
    /// The snapshot shipped with the artifact.
    pub fn bundled() -> PublicSuffixList {
        PublicSuffixList::parse(BUNDLED)
    }

    /// Parse the standard text format: one rule per line, "//" comments,
    /// "!" exceptions, "*." wildcards. Unparseable lines are skipped.
    pub fn parse(text: &str) -> PublicSuffixList {
        let mut rules = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            // Rules end at the first whitespace.
            let rule = line.split_whitespace().next().unwrap_or("");
            let (kind, body) = if let Some(rest) = rule.strip_prefix('!') {
                (EXCEPTION, rest)
            } else if let Some(rest) = rule.strip_prefix("*.") {
                (WILDCARD, rest)
            } else {
                (NORMAL, rule)
            };
            if body.is_empty() {
                continue;
            }
            *rules.entry(body.to_ascii_lowercase()).or_insert(0) |= kind;
        }
        PublicSuffixList { rules }
    }

    pub fn from_file(path: &Path) -> std::io::Result<PublicSuffixList> {
        Ok(PublicSuffixList::parse(&std::fs::read_to_string(path)?))
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    /// Number of labels in the host's public suffix.
    ///
    /// The prevailing rule is the longest match, except that a matching
    /// exception rule always wins (and its suffix is the rule minus its
    /// leftmost label). Hosts matching no rule fall back to the implicit
    /// "*" rule: a one-label suffix.
    fn suffix_label_count(&self, labels: &[&str]) -> usize {
        let mut best: usize = 1;
        for start in (0..labels.len()).rev() {
            let candidate = labels[start..].join(".");
            let Some(&flags) = self.rules.get(&candidate) else {
                continue;
            };
            if flags & EXCEPTION != 0 {
                return labels.len() - start - 1;
            }
            if flags & NORMAL != 0 {
                best = best.max(labels.len() - start);
            }
            if flags & WILDCARD != 0 && start > 0 {
                // "*.foo" makes any direct child of foo a suffix.
                best = best.max(labels.len() - start + 1);
            }
        }
        best
    }

    /// The registrable domain: public suffix plus one label. Hosts that
    /// are themselves a public suffix, and IP literals, come back
    /// unchanged.
    pub fn registrable_domain(&self, host: &str) -> String {
        if canonical::is_ip_literal(host) {
            return host.to_string();
        }
        let labels: Vec<&str> = host.split('.').collect();
        let suffix_len = self.suffix_label_count(&labels);
        if suffix_len >= labels.len() {
            return host.to_string();
        }
        labels[labels.len() - suffix_len - 1..].join(".")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn psl() -> PublicSuffixList {
        PublicSuffixList::bundled()
    }

    #[test]
    fn plain_tld() {
        assert_eq!(psl().registrable_domain("example.com"), "example.com");
        assert_eq!(psl().registrable_domain("www.example.com"), "example.com");
        assert_eq!(psl().registrable_domain("a.b.example.com"), "example.com");
    }

    #[test]
    fn multi_label_suffix() {
        assert_eq!(
            psl().registrable_domain("news.example.co.uk"),
            "example.co.uk"
        );
        assert_eq!(psl().registrable_domain("example.co.uk"), "example.co.uk");
    }

    #[test]
    fn host_that_is_a_suffix_returns_itself() {
        assert_eq!(psl().registrable_domain("com"), "com");
        assert_eq!(psl().registrable_domain("co.uk"), "co.uk");
    }

    #[test]
    fn ip_literals_unchanged() {
        assert_eq!(psl().registrable_domain("192.168.0.1"), "192.168.0.1");
        assert_eq!(psl().registrable_domain("[::1]"), "[::1]");
    }

    #[test]
    fn unknown_tld_uses_implicit_star() {
        assert_eq!(psl().registrable_domain("news.example"), "news.example");
        assert_eq!(psl().registrable_domain("a.news.example"), "news.example");
        assert_eq!(psl().registrable_domain("tracker.zzz"), "tracker.zzz");
    }

    #[test]
    fn wildcard_rules() {
        // *.ck: any direct child of ck is a suffix.
        assert_eq!(psl().registrable_domain("foo.ck"), "foo.ck");
        assert_eq!(psl().registrable_domain("a.b.foo.ck"), "b.foo.ck");
        assert_eq!(psl().registrable_domain("bar.mm"), "bar.mm");
        assert_eq!(psl().registrable_domain("x.bar.mm"), "x.bar.mm");
    }

    #[test]
    fn exception_rules_beat_wildcards() {
        // !www.ck carves www.ck out of *.ck.
        assert_eq!(psl().registrable_domain("www.ck"), "www.ck");
        assert_eq!(psl().registrable_domain("a.www.ck"), "www.ck");
        assert_eq!(
            psl().registrable_domain("city.kawasaki.jp"),
            "city.kawasaki.jp"
        );
        assert_eq!(
            psl().registrable_domain("sub.city.kawasaki.jp"),
            "city.kawasaki.jp"
        );
        // "other.kawasaki.jp" is itself a suffix under *.kawasaki.jp, so
        // one more label is needed to form a registrable domain.
        assert_eq!(
            psl().registrable_domain("other.kawasaki.jp"),
            "other.kawasaki.jp"
        );
        assert_eq!(
            psl().registrable_domain("sub.other.kawasaki.jp"),
            "sub.other.kawasaki.jp"
        );
        assert_eq!(
            psl().registrable_domain("deep.sub.other.kawasaki.jp"),
            "sub.other.kawasaki.jp"
        );
    }

    #[test]
    fn private_section_rules_apply() {
        assert_eq!(
            psl().registrable_domain("myblog.blogspot.com"),
            "myblog.blogspot.com"
        );
        assert_eq!(
            psl().registrable_domain("www.myblog.blogspot.com"),
            "myblog.blogspot.com"
        );
    }

    #[test]
    fn parse_skips_comments_and_blank_lines() {
        let list = PublicSuffixList::parse("// header\n\ncom\n*.x\n!keep.x\n");
        assert_eq!(list.rule_count(), 3);
        assert_eq!(list.registrable_domain("a.b.x"), "a.b.x");
        assert_eq!(list.registrable_domain("keep.x"), "keep.x");
        assert_eq!(list.registrable_domain("a.keep.x"), "keep.x");
    }
}
