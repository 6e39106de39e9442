//! Versioned hash-prefix store over blocklist expressions.
//!
//! Every expression is stored as the first four bytes of its SHA-256
//! digest (the prefix set consulted on the hot path) plus the full digest
//! for confirmation, so a prefix collision can never produce a false
//! block. Updates arrive as versioned diffs or full snapshots; a store is
//! immutable once built and swapped whole.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::{self, CanonicalUrl, LookupExpression};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("expression not in canonical form: {0:?}")]
    InvalidExpression(String),
    #[error("update expects version {expected}, store is at {actual}")]
    VersionMismatch { expected: u64, actual: u64 },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("invalid update: {0}")]
    InvalidUpdate(String),
}

/// First four bytes of the SHA-256 digest of an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HashPrefix(pub [u8; 4]);

/// Complete SHA-256 digest of an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FullHash(pub [u8; 32]);

impl FullHash {
    pub fn of(expression: &str) -> FullHash {
        let digest = Sha256::digest(expression.as_bytes());
        FullHash(digest.into())
    }

    pub fn prefix(&self) -> HashPrefix {
        HashPrefix([self.0[0], self.0[1], self.0[2], self.0[3]])
    }
}

/// Outcome of a store lookup. A match always carries the stored expression
/// whose full hash confirmed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub expression: Option<String>,
}

impl MatchResult {
    pub fn matched(&self) -> bool {
        self.expression.is_some()
    }

    fn miss() -> MatchResult {
        MatchResult { expression: None }
    }
}

/// A versioned diff (or, with `from_version` 0, a full snapshot) of the
/// blocklist expression set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListUpdate {
    pub from_version: u64,
    pub to_version: u64,
    #[serde(default)]
    pub add: Vec<String>,
    #[serde(default)]
    pub remove: Vec<String>,
}

impl ListUpdate {
    pub fn snapshot(to_version: u64, add: Vec<String>) -> ListUpdate {
        ListUpdate {
            from_version: 0,
            to_version,
            add,
            remove: Vec::new(),
        }
    }

    pub fn is_snapshot(&self) -> bool {
        self.from_version == 0
    }

    /// Check structural invariants: versions must advance and no
    /// expression may be both added and removed.
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.to_version <= self.from_version {
            return Err(StoreError::InvalidUpdate(format!(
                "to_version {} must exceed from_version {}",
                self.to_version, self.from_version
            )));
        }
        if !self.remove.is_empty() {
            let adds: std::collections::BTreeSet<&String> = self.add.iter().collect();
            if let Some(both) = self.remove.iter().find(|e| adds.contains(e)) {
                return Err(StoreError::InvalidUpdate(format!(
                    "expression {both:?} appears in both add and remove"
                )));
            }
        }
        Ok(())
    }
}

/// Immutable set of hash prefixes and confirming full hashes for one
/// version of the blocklist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixStore {
    version: u64,
    /// Sorted, duplicate-free; binary-searched on lookup.
    prefixes: Vec<HashPrefix>,
    /// Full hash -> stored expression, for confirmation and reporting.
    full_hashes: BTreeMap<FullHash, String>,
}

impl PrefixStore {
    /// Empty store at version 0: every lookup misses, the proxy becomes a
    /// transparent relay.
    pub fn empty() -> PrefixStore {
        PrefixStore {
            version: 0,
            prefixes: Vec::new(),
            full_hashes: BTreeMap::new(),
        }
    }

    /// Compile a store (version 1) from canonical-form expressions.
    pub fn build<I, S>(expressions: I) -> Result<PrefixStore, StoreError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut store = PrefixStore::empty();
        store.version = 1;
        for expr in expressions {
            store.insert(expr.as_ref())?;
        }
        Ok(store)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn expression_count(&self) -> usize {
        self.full_hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.full_hashes.is_empty() && self.prefixes.is_empty()
    }

    /// Iterate stored expressions in sorted order.
    pub fn expressions(&self) -> impl Iterator<Item = &str> {
        self.full_hashes.values().map(String::as_str)
    }

    /// Insert a bare prefix with no confirming full hash. Lookups hitting
    /// only this prefix stay misses; it exists so prefix-stage behavior
    /// can be exercised and partial prefix feeds represented.
    pub fn insert_prefix(&mut self, prefix: HashPrefix) {
        if let Err(pos) = self.prefixes.binary_search(&prefix) {
            self.prefixes.insert(pos, prefix);
        }
    }

    fn insert(&mut self, expression: &str) -> Result<(), StoreError> {
        validate_expression(expression)?;
        let hash = FullHash::of(expression);
        self.insert_prefix(hash.prefix());
        self.full_hashes.insert(hash, expression.to_string());
        Ok(())
    }

    fn remove(&mut self, expression: &str) {
        let hash = FullHash::of(expression);
        if self.full_hashes.remove(&hash).is_none() {
            // Absent removes are ignored so retried diffs stay idempotent.
            return;
        }
        let prefix = hash.prefix();
        let still_used = self.full_hashes.keys().any(|h| h.prefix() == prefix);
        if !still_used {
            if let Ok(pos) = self.prefixes.binary_search(&prefix) {
                self.prefixes.remove(pos);
            }
        }
    }

    /// Match a canonical URL against the store.
    ///
    /// Expands the URL into its lookup expressions (most-specific first),
    /// filters through the prefix set, and confirms candidates against the
    /// full-hash set. The first confirmed expression wins.
    pub fn lookup(&self, url: &CanonicalUrl) -> MatchResult {
        self.lookup_expressions(&canonical::lookup_expressions(url))
    }

    /// Match a pre-expanded expression list (used for CONNECT, where only
    /// host-level expressions exist).
    pub fn lookup_expressions(&self, expressions: &[LookupExpression]) -> MatchResult {
        if self.prefixes.is_empty() {
            return MatchResult::miss();
        }
        for expr in expressions {
            let hash = FullHash::of(expr.as_str());
            if self.prefixes.binary_search(&hash.prefix()).is_err() {
                continue;
            }
            if let Some(stored) = self.full_hashes.get(&hash) {
                return MatchResult {
                    expression: Some(stored.clone()),
                };
            }
        }
        MatchResult::miss()
    }

    /// Apply a snapshot or diff, yielding the successor store.
    ///
    /// Snapshots replace the contents outright; diffs require the store's
    /// exact current version and remove before adding.
    pub fn apply_update(&self, update: &ListUpdate) -> Result<PrefixStore, StoreError> {
        update.validate().map_err(|e| match e {
            StoreError::InvalidUpdate(m) => StoreError::InvalidUpdate(m),
            other => other,
        })?;
        let mut next = if update.is_snapshot() {
            PrefixStore::empty()
        } else {
            if update.from_version != self.version {
                return Err(StoreError::VersionMismatch {
                    expected: update.from_version,
                    actual: self.version,
                });
            }
            self.clone()
        };
        for expr in &update.remove {
            next.remove(expr);
        }
        for expr in &update.add {
            next.insert(expr)?;
        }
        next.version = update.to_version;
        Ok(next)
    }

    /// Serialize as a snapshot (the list-compiler wire format plus the
    /// on-disk header). Deterministic: expressions come out sorted.
    pub fn serialize(&self) -> Vec<u8> {
        let file = crate::list::SnapshotFile::from_store(self);
        let mut bytes = serde_json::to_vec_pretty(&file).expect("snapshot serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn deserialize(bytes: &[u8]) -> Result<PrefixStore, StoreError> {
        let file: crate::list::SnapshotFile = serde_json::from_slice(bytes)
            .map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
        file.into_store()
    }
}

/// Expressions are `<host>/<path-prefix>[?query]` with a canonical host.
pub fn validate_expression(expression: &str) -> Result<(), StoreError> {
    let slash = expression
        .find('/')
        .ok_or_else(|| StoreError::InvalidExpression(expression.to_string()))?;
    let host = &expression[..slash];
    match canonical::canonicalize_host_str(host) {
        Ok(canon) if canon == host => Ok(()),
        _ => Err(StoreError::InvalidExpression(expression.to_string())),
    }
}

/// Shared handle to the live store. Updates build a fresh store and swap
/// it in; readers grab an `Arc` and never observe a partial update.
#[derive(Debug)]
pub struct StoreHandle {
    inner: RwLock<Arc<PrefixStore>>,
}

impl StoreHandle {
    pub fn new(store: PrefixStore) -> StoreHandle {
        StoreHandle {
            inner: RwLock::new(Arc::new(store)),
        }
    }

    pub fn current(&self) -> Arc<PrefixStore> {
        self.inner.read().expect("store lock").clone()
    }

    pub fn swap(&self, store: PrefixStore) {
        *self.inner.write().expect("store lock") = Arc::new(store);
    }
}
