//! Request classification policy.
//!
//! Turns a store match into an allow/block decision. Navigations are never
//! blocked (the mechanism filters embedded content, not direct visits),
//! per-site overrides suspend blocking for a first-party site, and an
//! optional third-party-only mode exempts same-site subresources. Page
//! outcomes feed a three-bucket telemetry counter: protection active,
//! protection disabled, no tracking elements present.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::canonical::CanonicalUrl;
use crate::psl::PublicSuffixList;
use crate::session::PageSessionSnapshot;
use crate::store::PrefixStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Navigation,
    Subresource,
}

/// DOM element class a subresource request was issued for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementHint {
    Script,
    Img,
    Iframe,
    Object,
    Stylesheet,
    Other,
}

impl ElementHint {
    pub fn as_str(&self) -> &'static str {
        match self {
            ElementHint::Script => "script",
            ElementHint::Img => "img",
            ElementHint::Iframe => "iframe",
            ElementHint::Object => "object",
            ElementHint::Stylesheet => "stylesheet",
            ElementHint::Other => "other",
        }
    }
}

impl fmt::Display for ElementHint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ElementHint {
    type Err = ();

    fn from_str(s: &str) -> Result<ElementHint, ()> {
        match s.to_ascii_lowercase().as_str() {
            "script" => Ok(ElementHint::Script),
            "img" | "image" => Ok(ElementHint::Img),
            "iframe" => Ok(ElementHint::Iframe),
            "object" => Ok(ElementHint::Object),
            "stylesheet" | "link" => Ok(ElementHint::Stylesheet),
            "other" => Ok(ElementHint::Other),
            _ => Err(()),
        }
    }
}

/// Everything classification needs to know about one request.
#[derive(Debug, Clone)]
pub struct RequestMeta {
    pub url: CanonicalUrl,
    pub kind: RequestKind,
    /// Host of the top-level page this request belongs to. Absent for
    /// navigations and for unattributed subresources.
    pub first_party_host: Option<String>,
    pub element_hint: Option<ElementHint>,
}

impl RequestMeta {
    pub fn navigation(url: CanonicalUrl) -> RequestMeta {
        RequestMeta {
            url,
            kind: RequestKind::Navigation,
            first_party_host: None,
            element_hint: None,
        }
    }

    pub fn subresource(
        url: CanonicalUrl,
        first_party_host: Option<String>,
        element_hint: Option<ElementHint>,
    ) -> RequestMeta {
        RequestMeta {
            url,
            kind: RequestKind::Subresource,
            first_party_host,
            element_hint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionReason {
    NoMatch,
    NavigationExempt,
    SiteOverride,
    FirstPartyExempt,
    Blocked,
}

/// Outcome of classifying one request.
///
/// `matched_expression` is present on every block. It is also populated on
/// allow decisions whose exemption suppressed an actual list match
/// (override or first-party exemption), so callers can tell "allowed, but
/// a tracker was present" from "nothing matched".
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub reason: DecisionReason,
    pub matched_expression: Option<String>,
}

impl Decision {
    pub fn is_blocked(&self) -> bool {
        self.verdict == Verdict::Block
    }

    fn allow(reason: DecisionReason, matched: Option<String>) -> Decision {
        Decision {
            verdict: Verdict::Allow,
            reason,
            matched_expression: matched,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PolicyConfig {
    /// When set, subresources sharing the first party's registrable domain
    /// are exempt. Off by default: any matching subresource is blocked.
    pub third_party_only: bool,
}

/// Classify a request against the live store.
///
/// Rules apply in order: navigation exemption, per-site override,
/// first-party exemption (when configured), list match, default allow.
pub fn classify(
    req: &RequestMeta,
    store: &PrefixStore,
    overrides: &OverrideSet,
    psl: &PublicSuffixList,
    cfg: &PolicyConfig,
) -> Decision {
    if req.kind == RequestKind::Navigation {
        return Decision::allow(DecisionReason::NavigationExempt, None);
    }
    // The lookup runs even when an exemption will win, so exempted matches
    // stay observable (telemetry needs "tracker present while disabled").
    let lookup = store.lookup(&req.url);
    if let Some(first_party) = req.first_party_host.as_deref() {
        let site = psl.registrable_domain(first_party);
        if overrides.contains(&site) {
            return Decision::allow(DecisionReason::SiteOverride, lookup.expression);
        }
        if cfg.third_party_only && psl.registrable_domain(&req.url.host) == site {
            return Decision::allow(DecisionReason::FirstPartyExempt, lookup.expression);
        }
    }
    match lookup.expression {
        Some(expr) => Decision {
            verdict: Verdict::Block,
            reason: DecisionReason::Blocked,
            matched_expression: Some(expr),
        },
        None => Decision::allow(DecisionReason::NoMatch, None),
    }
}

/// Sites (registrable domains) the user disabled protection for.
/// Mutations normalize through the PSL, so an override set for any
/// subdomain covers the whole site.
#[derive(Debug, Default)]
pub struct OverrideSet {
    disabled: RwLock<BTreeSet<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OverrideFile {
    disabled_sites: Vec<String>,
}

impl OverrideSet {
    pub fn new() -> OverrideSet {
        OverrideSet::default()
    }

    /// Disable protection for the site containing `host`. Idempotent.
    pub fn set(&self, host: &str, psl: &PublicSuffixList) -> String {
        let site = psl.registrable_domain(host);
        self.disabled
            .write()
            .expect("override lock")
            .insert(site.clone());
        site
    }

    /// Re-enable protection. Clearing an absent site is a no-op.
    pub fn clear(&self, host: &str, psl: &PublicSuffixList) -> String {
        let site = psl.registrable_domain(host);
        self.disabled.write().expect("override lock").remove(&site);
        site
    }

    pub fn contains(&self, site: &str) -> bool {
        self.disabled.read().expect("override lock").contains(site)
    }

    pub fn sites(&self) -> Vec<String> {
        self.disabled
            .read()
            .expect("override lock")
            .iter()
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.disabled.read().expect("override lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let file = OverrideFile {
            disabled_sites: self.sites(),
        };
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)
    }

    pub fn load(path: &Path) -> std::io::Result<OverrideSet> {
        let bytes = std::fs::read(path)?;
        let file: OverrideFile = serde_json::from_slice(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let set = OverrideSet::new();
        *set.disabled.write().expect("override lock") = file.disabled_sites.into_iter().collect();
        Ok(set)
    }
}

/// Which telemetry bucket a finished page load fell into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TelemetryBucket {
    /// Protection on and at least one request blocked.
    Active,
    /// Protection disabled for the site while trackers were present.
    Disabled,
    /// No tracking elements present.
    None,
}

/// Page-load counters in the three-bucket breakdown. Increments are
/// atomic; one page load lands in exactly one bucket.
#[derive(Debug, Default)]
pub struct TelemetryCounters {
    active: AtomicU64,
    disabled: AtomicU64,
    none: AtomicU64,
}

/// Point-in-time counter readout with derived percentages. The disable
/// rate is disabled / (active + disabled), the share of tracker-bearing
/// pages where the user turned protection off; it is null until that
/// denominator is nonzero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterSnapshot {
    pub active: u64,
    pub disabled: u64,
    pub none: u64,
    pub total: u64,
    pub active_pct: f64,
    pub disabled_pct: f64,
    pub none_pct: f64,
    pub disable_rate_pct: Option<f64>,
}

impl TelemetryCounters {
    pub fn new() -> TelemetryCounters {
        TelemetryCounters::default()
    }

    /// Seed counters with known values (reporting over external counts).
    pub fn with_counts(active: u64, disabled: u64, none: u64) -> TelemetryCounters {
        TelemetryCounters {
            active: AtomicU64::new(active),
            disabled: AtomicU64::new(disabled),
            none: AtomicU64::new(none),
        }
    }

    /// Account a finalized page session to exactly one bucket.
    ///
    /// A session lands in `disabled` when its site is overridden and at
    /// least one request matched the list; in `active` when not overridden
    /// and at least one request was blocked; in `none` otherwise.
    pub fn record_page_load(
        &self,
        session: &PageSessionSnapshot,
        overrides: &OverrideSet,
        psl: &PublicSuffixList,
    ) -> TelemetryBucket {
        let overridden = session
            .first_party_host
            .as_deref()
            .map(|h| overrides.contains(&psl.registrable_domain(h)))
            .unwrap_or(false);
        if overridden && session.match_count >= 1 {
            self.disabled.fetch_add(1, Ordering::Relaxed);
            TelemetryBucket::Disabled
        } else if !overridden && session.blocked_count >= 1 {
            self.active.fetch_add(1, Ordering::Relaxed);
            TelemetryBucket::Active
        } else {
            self.none.fetch_add(1, Ordering::Relaxed);
            TelemetryBucket::None
        }
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let active = self.active.load(Ordering::Relaxed);
        let disabled = self.disabled.load(Ordering::Relaxed);
        let none = self.none.load(Ordering::Relaxed);
        let total = active + disabled + none;
        let pct = |n: u64| {
            if total == 0 {
                0.0
            } else {
                n as f64 / total as f64 * 100.0
            }
        };
        let shown = active + disabled;
        CounterSnapshot {
            active,
            disabled,
            none,
            total,
            active_pct: pct(active),
            disabled_pct: pct(disabled),
            none_pct: pct(none),
            disable_rate_pct: if shown == 0 {
                None
            } else {
                Some(disabled as f64 / shown as f64 * 100.0)
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::parse_and_canonicalize;
    use crate::session::PageSessionSnapshot;

    fn url(raw: &str) -> CanonicalUrl {
        parse_and_canonicalize(raw).unwrap()
    }

    fn tracker_store() -> PrefixStore {
        PrefixStore::build(["tracker.example/"]).unwrap()
    }

    fn ctx() -> (PublicSuffixList, OverrideSet, PolicyConfig) {
        (
            PublicSuffixList::bundled(),
            OverrideSet::new(),
            PolicyConfig::default(),
        )
    }

    #[test]
    fn navigation_to_listed_domain_is_exempt() {
        let (psl, overrides, cfg) = ctx();
        let d = classify(
            &RequestMeta::navigation(url("http://tracker.example/")),
            &tracker_store(),
            &overrides,
            &psl,
            &cfg,
        );
        assert_eq!(d.verdict, Verdict::Allow);
        assert_eq!(d.reason, DecisionReason::NavigationExempt);
    }

    #[test]
    fn matching_subresource_blocked() {
        let (psl, overrides, cfg) = ctx();
        let d = classify(
            &RequestMeta::subresource(
                url("http://ads.tracker.example/pix.gif"),
                Some("news.example".into()),
                Some(ElementHint::Img),
            ),
            &tracker_store(),
            &overrides,
            &psl,
            &cfg,
        );
        assert_eq!(d.verdict, Verdict::Block);
        assert_eq!(d.reason, DecisionReason::Blocked);
        assert_eq!(d.matched_expression.as_deref(), Some("tracker.example/"));
    }

    #[test]
    fn override_allows_and_reports_suppressed_match() {
        let (psl, overrides, cfg) = ctx();
        overrides.set("news.example", &psl);
        let d = classify(
            &RequestMeta::subresource(
                url("http://ads.tracker.example/pix.gif"),
                Some("news.example".into()),
                None,
            ),
            &tracker_store(),
            &overrides,
            &psl,
            &cfg,
        );
        assert_eq!(d.verdict, Verdict::Allow);
        assert_eq!(d.reason, DecisionReason::SiteOverride);
        assert_eq!(d.matched_expression.as_deref(), Some("tracker.example/"));
    }

    #[test]
    fn override_applies_across_subdomains() {
        let (psl, overrides, cfg) = ctx();
        overrides.set("a.news.example", &psl);
        let d = classify(
            &RequestMeta::subresource(
                url("http://tracker.example/t.js"),
                Some("b.news.example".into()),
                None,
            ),
            &tracker_store(),
            &overrides,
            &psl,
            &cfg,
        );
        assert_eq!(d.reason, DecisionReason::SiteOverride);
    }

    #[test]
    fn third_party_only_exempts_same_site() {
        let (psl, overrides, _) = ctx();
        let cfg = PolicyConfig {
            third_party_only: true,
        };
        // The first party itself is on the list.
        let store = PrefixStore::build(["social.example/"]).unwrap();
        let same_site = classify(
            &RequestMeta::subresource(
                url("http://cdn.social.example/w.js"),
                Some("social.example".into()),
                None,
            ),
            &store,
            &overrides,
            &psl,
            &cfg,
        );
        assert_eq!(same_site.verdict, Verdict::Allow);
        assert_eq!(same_site.reason, DecisionReason::FirstPartyExempt);
        assert_eq!(
            same_site.matched_expression.as_deref(),
            Some("social.example/")
        );

        let cross_site = classify(
            &RequestMeta::subresource(
                url("http://cdn.social.example/w.js"),
                Some("news.example".into()),
                None,
            ),
            &store,
            &overrides,
            &psl,
            &cfg,
        );
        assert_eq!(cross_site.verdict, Verdict::Block);
    }

    #[test]
    fn default_config_blocks_first_party_matches() {
        let (psl, overrides, cfg) = ctx();
        let store = PrefixStore::build(["social.example/"]).unwrap();
        let d = classify(
            &RequestMeta::subresource(
                url("http://cdn.social.example/w.js"),
                Some("social.example".into()),
                None,
            ),
            &store,
            &overrides,
            &psl,
            &cfg,
        );
        assert_eq!(d.verdict, Verdict::Block);
    }

    #[test]
    fn no_match_allows() {
        let (psl, overrides, cfg) = ctx();
        let d = classify(
            &RequestMeta::subresource(
                url("http://cdn.news.example/app.css"),
                Some("news.example".into()),
                Some(ElementHint::Stylesheet),
            ),
            &tracker_store(),
            &overrides,
            &psl,
            &cfg,
        );
        assert_eq!(d.verdict, Verdict::Allow);
        assert_eq!(d.reason, DecisionReason::NoMatch);
        assert_eq!(d.matched_expression, None);
    }

    #[test]
    fn override_set_is_idempotent_and_normalizes() {
        let psl = PublicSuffixList::bundled();
        let overrides = OverrideSet::new();
        overrides.set("news.example", &psl);
        overrides.set("news.example", &psl);
        assert_eq!(overrides.len(), 1);

        overrides.set("a.news.example", &psl);
        assert_eq!(overrides.len(), 1);
        assert!(overrides.contains("news.example"));

        overrides.clear("absent.example", &psl);
        assert_eq!(overrides.len(), 1);
        overrides.clear("deep.news.example", &psl);
        assert!(overrides.is_empty());
    }

    #[test]
    fn override_persistence_round_trips() {
        let psl = PublicSuffixList::bundled();
        let overrides = OverrideSet::new();
        overrides.set("news.example", &psl);
        overrides.set("shop.example.co.uk", &psl);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overrides.json");
        overrides.save(&path).unwrap();
        let loaded = OverrideSet::load(&path).unwrap();
        assert_eq!(loaded.sites(), vec!["example.co.uk", "news.example"]);
    }

    fn page(first_party: &str, blocked: u64, matched: u64) -> PageSessionSnapshot {
        PageSessionSnapshot {
            id: "s".into(),
            first_party_host: Some(first_party.into()),
            age_ms: 0,
            request_count: matched.max(blocked) + 3,
            blocked_count: blocked,
            match_count: matched,
            bytes_downloaded: 0,
            blocked_by_type: Default::default(),
            contacted_hosts: Default::default(),
        }
    }

    #[test]
    fn page_loads_land_in_exactly_one_bucket() {
        let psl = PublicSuffixList::bundled();
        let overrides = OverrideSet::new();
        let counters = TelemetryCounters::new();

        // Blocked requests, no override: active.
        let b = counters.record_page_load(&page("news.example", 3, 3), &overrides, &psl);
        assert_eq!(b, TelemetryBucket::Active);

        // Overridden site where requests matched but were allowed.
        overrides.set("shop.example", &psl);
        let b = counters.record_page_load(&page("shop.example", 0, 2), &overrides, &psl);
        assert_eq!(b, TelemetryBucket::Disabled);

        // Zero matches anywhere: none.
        let b = counters.record_page_load(&page("clean.example", 0, 0), &overrides, &psl);
        assert_eq!(b, TelemetryBucket::None);

        // Overridden but no trackers present: none, not disabled.
        let b = counters.record_page_load(&page("shop.example", 0, 0), &overrides, &psl);
        assert_eq!(b, TelemetryBucket::None);

        let snap = counters.snapshot();
        assert_eq!((snap.active, snap.disabled, snap.none), (1, 1, 2));
        assert_eq!(snap.total, 4);
    }

    #[test]
    fn snapshot_percentages_and_disable_rate() {
        let counters = TelemetryCounters::with_counts(0, 0, 0);
        let snap = counters.snapshot();
        assert_eq!(snap.active_pct, 0.0);
        assert_eq!(snap.disable_rate_pct, None);

        let counters = TelemetryCounters::with_counts(1, 1, 0);
        let snap = counters.snapshot();
        assert_eq!(snap.active_pct, 50.0);
        assert_eq!(snap.disabled_pct, 50.0);
        assert_eq!(snap.none_pct, 0.0);
        assert_eq!(snap.disable_rate_pct, Some(50.0));
    }

    #[test]
    fn classify_is_deterministic() {
        let (psl, overrides, cfg) = ctx();
        let store = tracker_store();
        let req = RequestMeta::subresource(
            url("http://tracker.example/a.js"),
            Some("news.example".into()),
            Some(ElementHint::Script),
        );
        let first = classify(&req, &store, &overrides, &psl, &cfg);
        for _ in 0..10 {
            assert_eq!(classify(&req, &store, &overrides, &psl, &cfg), first);
        }
    }
}
