//! Periodic blocklist update client.
//!
//! Every interval the updater asks the list endpoint for changes since its
//! current version. The server answers with a diff when it can, a full
//! snapshot otherwise, or 304 when nothing changed. A version mismatch
//! triggers an immediate re-request from version 0. Failures never drop
//! protection: the stale store stays live and retries back off
//! exponentially, capped at eight intervals.

use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime};

use crate::http1::{self, RequestHead};
use crate::store::{ListUpdate, StoreError, StoreHandle};

/// Cap on exponential backoff, in multiples of the update interval.
const BACKOFF_CAP_FACTOR: u32 = 8;

/// Default cadence between update requests.
pub const DEFAULT_INTERVAL: Duration = Duration::from_secs(45 * 60);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpdateOutcome {
    /// Server said 304: nothing newer than the current version.
    Unchanged,
    /// Store advanced to this version.
    Applied(u64),
    /// Request or apply failed; stale store retained.
    Failed(String),
}

#[derive(Debug, Clone)]
struct UpdaterStatus {
    current_version: u64,
    last_success: Option<SystemTime>,
    consecutive_failures: u32,
}

/// Snapshot of updater health for status reporting.
#[derive(Debug, Clone, serde::Serialize)]
pub struct UpdaterReport {
    pub endpoint: String,
    pub current_version: u64,
    pub interval_secs: u64,
    /// Seconds since the epoch of the last successful cycle.
    pub last_success_epoch_secs: Option<u64>,
    pub consecutive_failures: u32,
}

/// Background list-update client bound to a live store handle.
#[derive(Debug)]
pub struct Updater {
    endpoint: String,
    interval: Duration,
    store: Arc<StoreHandle>,
    status: Mutex<UpdaterStatus>,
    kick: tokio::sync::Notify,
}

impl Updater {
    pub fn new(endpoint: String, interval: Duration, store: Arc<StoreHandle>) -> Arc<Updater> {
        assert!(!interval.is_zero(), "update interval must be positive");
        let version = store.current().version();
        Arc::new(Updater {
            endpoint,
            interval,
            store,
            status: Mutex::new(UpdaterStatus {
                current_version: version,
                last_success: None,
                consecutive_failures: 0,
            }),
            kick: tokio::sync::Notify::new(),
        })
    }

    pub fn report(&self) -> UpdaterReport {
        let status = self.status.lock().expect("updater status lock");
        UpdaterReport {
            endpoint: self.endpoint.clone(),
            current_version: status.current_version,
            interval_secs: self.interval.as_secs(),
            last_success_epoch_secs: status.last_success.map(|t| {
                t.duration_since(SystemTime::UNIX_EPOCH)
                    .unwrap_or_default()
                    .as_secs()
            }),
            consecutive_failures: status.consecutive_failures,
        }
    }

    /// Request an out-of-band cycle (control API reload).
    pub fn kick(&self) {
        self.kick.notify_one();
    }

    /// Run one update cycle: request, apply, swap. A `VersionMismatch`
    /// from a stale diff immediately re-requests from version 0.
    pub async fn update_once(&self) -> UpdateOutcome {
        let version = self.store.current().version();
        let outcome = match self.request_and_apply(version).await {
            Ok(outcome) => Ok(outcome),
            Err(CycleError::Mismatch) => self.request_and_apply(0).await,
            Err(CycleError::Other(e)) => Err(CycleError::Other(e)),
        };
        let mut status = self.status.lock().expect("updater status lock");
        match outcome {
            Ok(outcome) => {
                status.current_version = self.store.current().version();
                status.last_success = Some(SystemTime::now());
                status.consecutive_failures = 0;
                outcome
            }
            Err(CycleError::Mismatch) => {
                status.consecutive_failures += 1;
                UpdateOutcome::Failed("version mismatch persisted after snapshot".into())
            }
            Err(CycleError::Other(e)) => {
                status.consecutive_failures += 1;
                UpdateOutcome::Failed(e)
            }
        }
    }

    async fn request_and_apply(&self, version: u64) -> Result<UpdateOutcome, CycleError> {
        let (addr, path) = split_endpoint(&self.endpoint)
            .ok_or_else(|| CycleError::Other(format!("bad endpoint {:?}", self.endpoint)))?;
        let sep = if path.contains('?') { '&' } else { '?' };
        let target = format!("{path}{sep}version={version}");
        let mut head = RequestHead::new("GET", &target);
        head.headers.push("Host", &addr);
        head.headers.push("Connection", "close");

        let response = tokio::time::timeout(Duration::from_secs(30), http1::fetch(&addr, &head))
            .await
            .map_err(|_| CycleError::Other("update request timed out".into()))?
            .map_err(|e| CycleError::Other(format!("update request failed: {e}")))?;

        match response.head.status {
            304 => Ok(UpdateOutcome::Unchanged),
            200 => {
                let update: ListUpdate = serde_json::from_slice(&response.body)
                    .map_err(|e| CycleError::Other(format!("bad update body: {e}")))?;
                let current = self.store.current();
                match current.apply_update(&update) {
                    Ok(next) => {
                        let version = next.version();
                        self.store.swap(next);
                        Ok(UpdateOutcome::Applied(version))
                    }
                    Err(StoreError::VersionMismatch { .. }) => Err(CycleError::Mismatch),
                    Err(e) => Err(CycleError::Other(format!("update rejected: {e}"))),
                }
            }
            status => Err(CycleError::Other(format!("server returned {status}"))),
        }
    }

    /// Periodic loop. Never returns; on failure the stale store stays in
    /// service and the delay grows exponentially up to 8x the interval.
    pub async fn run(self: Arc<Updater>) {
        loop {
            let outcome = self.update_once().await;
            let delay = match &outcome {
                UpdateOutcome::Failed(reason) => {
                    let failures = self
                        .status
                        .lock()
                        .expect("updater status lock")
                        .consecutive_failures;
                    log::warn!("list update failed ({reason}); failure #{failures}");
                    let factor = 2u32
                        .saturating_pow(failures.saturating_sub(1))
                        .min(BACKOFF_CAP_FACTOR);
                    self.interval * factor
                }
                UpdateOutcome::Applied(v) => {
                    log::info!("blocklist updated to version {v}");
                    self.interval
                }
                UpdateOutcome::Unchanged => self.interval,
            };
            tokio::select! {
                _ = tokio::time::sleep(delay) => {}
                _ = self.kick.notified() => {}
            }
        }
    }
}

enum CycleError {
    Mismatch,
    Other(String),
}

/// Split "http://host:port/path" into (host:port, /path).
fn split_endpoint(endpoint: &str) -> Option<(String, String)> {
    let rest = endpoint
        .strip_prefix("http://")
        .or_else(|| endpoint.strip_prefix("HTTP://"))?;
    let (addr, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    if addr.is_empty() {
        return None;
    }
    let addr = if addr.contains(':') {
        addr.to_string()
    } else {
        format!("{addr}:80")
    };
    Some((addr, path.to_string()))
}
