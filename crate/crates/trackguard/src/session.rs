//! Page sessions: per-top-level-page request accounting.
//!
//! The proxy cannot see the DOM, so clients attribute requests to a page
//! by sending an opaque session id. Each session accumulates the counters
//! a page-level report needs: requests seen, requests blocked (by element
//! type), bytes relayed for allowed responses, and hosts contacted.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::policy::ElementHint;

/// Point-in-time copy of one session's counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSessionSnapshot {
    pub id: String,
    pub first_party_host: Option<String>,
    /// Milliseconds since the session was opened.
    pub age_ms: u64,
    pub request_count: u64,
    pub blocked_count: u64,
    /// Requests that matched the list, whether or not they were blocked
    /// (an override or exemption can allow a matching request).
    pub match_count: u64,
    /// Wire bytes (response head + body) relayed for allowed, completed
    /// responses. Blocked and failed requests contribute nothing.
    pub bytes_downloaded: u64,
    pub blocked_by_type: BTreeMap<ElementHint, u64>,
    pub contacted_hosts: BTreeSet<String>,
}

#[derive(Debug)]
struct SessionState {
    first_party_host: Option<String>,
    /// Host of a navigation announced but not yet tunneled; lets a
    /// following CONNECT to the same host classify as a navigation.
    pending_nav_host: Option<String>,
    started: Instant,
    request_count: u64,
    blocked_count: u64,
    match_count: u64,
    bytes_downloaded: u64,
    blocked_by_type: BTreeMap<ElementHint, u64>,
    contacted_hosts: BTreeSet<String>,
}

impl SessionState {
    fn new() -> SessionState {
        SessionState {
            first_party_host: None,
            pending_nav_host: None,
            started: Instant::now(),
            request_count: 0,
            blocked_count: 0,
            match_count: 0,
            bytes_downloaded: 0,
            blocked_by_type: BTreeMap::new(),
            contacted_hosts: BTreeSet::new(),
        }
    }

    fn snapshot(&self, id: &str) -> PageSessionSnapshot {
        PageSessionSnapshot {
            id: id.to_string(),
            first_party_host: self.first_party_host.clone(),
            age_ms: self.started.elapsed().as_millis() as u64,
            request_count: self.request_count,
            blocked_count: self.blocked_count,
            match_count: self.match_count,
            bytes_downloaded: self.bytes_downloaded,
            blocked_by_type: self.blocked_by_type.clone(),
            contacted_hosts: self.contacted_hosts.clone(),
        }
    }
}

/// All live sessions, keyed by client-chosen id. Sessions are created on
/// first use and removed on finalize.
#[derive(Debug, Default)]
pub struct SessionRegistry {
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
}

impl SessionRegistry {
    pub fn new() -> SessionRegistry {
        SessionRegistry::default()
    }

    fn entry(&self, id: &str) -> Arc<Mutex<SessionState>> {
        let mut sessions = self.sessions.lock().expect("session registry lock");
        sessions
            .entry(id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(SessionState::new())))
            .clone()
    }

    fn existing(&self, id: &str) -> Option<Arc<Mutex<SessionState>>> {
        self.sessions
            .lock()
            .expect("session registry lock")
            .get(id)
            .cloned()
    }

    /// Record that `id` navigated to `host`: the session's first party is
    /// set (first navigation wins) and a pending navigation is noted for
    /// CONNECT attribution.
    pub fn note_navigation(&self, id: &str, host: &str) {
        let entry = self.entry(id);
        let mut s = entry.lock().expect("session lock");
        if s.first_party_host.is_none() {
            s.first_party_host = Some(host.to_string());
        }
        s.pending_nav_host = Some(host.to_string());
    }

    /// Consume a pending navigation to `host`, if one is marked.
    pub fn take_pending_navigation(&self, id: &str, host: &str) -> bool {
        let Some(entry) = self.existing(id) else {
            return false;
        };
        let mut s = entry.lock().expect("session lock");
        if s.pending_nav_host.as_deref() == Some(host) {
            s.pending_nav_host = None;
            true
        } else {
            false
        }
    }

    pub fn first_party(&self, id: &str) -> Option<String> {
        self.existing(id)?
            .lock()
            .expect("session lock")
            .first_party_host
            .clone()
    }

    pub fn record_blocked(&self, id: &str, hint: Option<ElementHint>, matched: bool) {
        let entry = self.entry(id);
        let mut s = entry.lock().expect("session lock");
        s.request_count += 1;
        s.blocked_count += 1;
        if matched {
            s.match_count += 1;
        }
        *s.blocked_by_type
            .entry(hint.unwrap_or(ElementHint::Other))
            .or_insert(0) += 1;
    }

    /// Record an allowed, completed request: `bytes` is what was relayed
    /// back and `matched` marks an exempted list hit.
    pub fn record_allowed(&self, id: &str, host: &str, bytes: u64, matched: bool) {
        let entry = self.entry(id);
        let mut s = entry.lock().expect("session lock");
        s.request_count += 1;
        s.bytes_downloaded += bytes;
        if matched {
            s.match_count += 1;
        }
        s.contacted_hosts.insert(host.to_string());
    }

    /// Record an allowed request whose upstream failed: it counts as a
    /// request but contributes no bytes and no contacted host.
    pub fn record_failed(&self, id: &str, matched: bool) {
        let entry = self.entry(id);
        let mut s = entry.lock().expect("session lock");
        s.request_count += 1;
        if matched {
            s.match_count += 1;
        }
    }

    pub fn report(&self, id: &str) -> Option<PageSessionSnapshot> {
        Some(
            self.existing(id)?
                .lock()
                .expect("session lock")
                .snapshot(id),
        )
    }

    /// Remove the session and return its final counters.
    pub fn finalize(&self, id: &str) -> Option<PageSessionSnapshot> {
        let entry = self
            .sessions
            .lock()
            .expect("session registry lock")
            .remove(id)?;
        let snapshot = entry.lock().expect("session lock").snapshot(id);
        Some(snapshot)
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session registry lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
