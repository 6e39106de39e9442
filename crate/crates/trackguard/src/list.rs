//! Blocklist ingestion and compilation.
//!
//! Two source formats are understood: the Disconnect JSON layout
//! (categories of entities mapping homepages to domain arrays) and plain
//! text with one domain per line. Either compiles down to a full snapshot
//! whose expressions are `<domain>/`, so suffix expansion makes a single
//! entry cover every path and subdomain.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical;
use crate::store::{ListUpdate, PrefixStore, StoreError};

pub const SNAPSHOT_FORMAT: &str = "tp-snapshot";
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

/// Disconnect category treated as breakage-prone and excluded by default:
/// social widgets, embedded video, comment platforms.
pub const CONTENT_CATEGORY: &str = "Content";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ListError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid domain at line {line}: {domain:?}")]
    InvalidDomain { line: usize, domain: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    DisconnectJson,
    PlainText,
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceFormat::DisconnectJson => f.write_str("disconnect"),
            SourceFormat::PlainText => f.write_str("plain"),
        }
    }
}

/// A parsed, deduplicated set of canonical tracking domains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainList {
    pub name: String,
    pub source_format: SourceFormat,
    pub domains: BTreeSet<String>,
}

impl DomainList {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

/// Which Disconnect categories to compile. Defaults to everything except
/// "Content".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryFilter {
    excluded: BTreeSet<String>,
}

impl Default for CategoryFilter {
    fn default() -> CategoryFilter {
        CategoryFilter {
            excluded: BTreeSet::from([CONTENT_CATEGORY.to_string()]),
        }
    }
}

impl CategoryFilter {
    /// Include every category.
    pub fn all() -> CategoryFilter {
        CategoryFilter {
            excluded: BTreeSet::new(),
        }
    }

    pub fn excluding<I, S>(categories: I) -> CategoryFilter
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CategoryFilter {
            excluded: categories.into_iter().map(Into::into).collect(),
        }
    }

    pub fn includes(&self, category: &str) -> bool {
        !self.excluded.contains(category)
    }
}

/// Parse a Disconnect-format JSON document.
///
/// Expected shape:
/// `{"categories": {<category>: [ {<entity>: {<homepage>: [<domain>...]}} ... ]}}`
pub fn parse_disconnect(text: &str, filter: &CategoryFilter) -> Result<DomainList, ListError> {
    let root: Value = serde_json::from_str(text).map_err(|e| ListError::Schema {
        path: "$".to_string(),
        message: e.to_string(),
    })?;
    let categories = root
        .get("categories")
        .ok_or_else(|| schema_err("$", "missing \"categories\" field"))?
        .as_object()
        .ok_or_else(|| schema_err("categories", "expected an object"))?;

    let mut domains = BTreeSet::new();
    for (category, entries) in categories {
        let entries = entries
            .as_array()
            .ok_or_else(|| schema_err(&format!("categories.{category}"), "expected an array"))?;
        for (i, entry) in entries.iter().enumerate() {
            let path = format!("categories.{category}[{i}]");
            let entity = entry
                .as_object()
                .ok_or_else(|| schema_err(&path, "expected an entity object"))?;
            for (entity_name, homepages) in entity {
                let path = format!("{path}.{entity_name}");
                let homepages = homepages
                    .as_object()
                    .ok_or_else(|| schema_err(&path, "expected a homepage object"))?;
                for (homepage, list) in homepages {
                    let path = format!("{path}.{homepage}");
                    let list = list
                        .as_array()
                        .ok_or_else(|| schema_err(&path, "expected a domain array"))?;
                    for (j, domain) in list.iter().enumerate() {
                        let path = format!("{path}[{j}]");
                        let raw = domain
                            .as_str()
                            .ok_or_else(|| schema_err(&path, "expected a domain string"))?;
                        let canon = canonical::canonicalize_host_str(raw)
                            .map_err(|e| schema_err(&path, &format!("invalid domain: {e}")))?;
                        if filter.includes(category) {
                            domains.insert(canon);
                        }
                    }
                }
            }
        }
    }
    Ok(DomainList {
        name: "disconnect".to_string(),
        source_format: SourceFormat::DisconnectJson,
        domains,
    })
}

/// Parse a plain-text list: one domain per line, "#" comments and blank
/// lines ignored. Entries are canonicalized and deduplicated.
pub fn parse_plain(text: &str) -> Result<DomainList, ListError> {
    let mut domains = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let canon =
            canonical::canonicalize_host_str(line).map_err(|_| ListError::InvalidDomain {
                line: idx + 1,
                domain: line.to_string(),
            })?;
        domains.insert(canon);
    }
    Ok(DomainList {
        name: "plain".to_string(),
        source_format: SourceFormat::PlainText,
        domains,
    })
}

/// Compile a domain list into a full snapshot (version 1) of `<domain>/`
/// expressions.
pub fn compile(list: &DomainList) -> ListUpdate {
    compile_versioned(list, 1)
}

/// Compile with an explicit target version (update servers bump this).
pub fn compile_versioned(list: &DomainList, to_version: u64) -> ListUpdate {
    ListUpdate::snapshot(
        to_version,
        list.domains.iter().map(|d| format!("{d}/")).collect(),
    )
}

/// On-disk snapshot: the update wire object plus a format header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub format: String,
    pub v: u32,
    pub from_version: u64,
    pub to_version: u64,
    pub add: Vec<String>,
    pub remove: Vec<String>,
}

impl SnapshotFile {
    pub fn from_update(update: &ListUpdate) -> SnapshotFile {
        SnapshotFile {
            format: SNAPSHOT_FORMAT.to_string(),
            v: SNAPSHOT_FORMAT_VERSION,
            from_version: update.from_version,
            to_version: update.to_version,
            add: update.add.clone(),
            remove: update.remove.clone(),
        }
    }

    pub fn from_store(store: &PrefixStore) -> SnapshotFile {
        SnapshotFile {
            format: SNAPSHOT_FORMAT.to_string(),
            v: SNAPSHOT_FORMAT_VERSION,
            from_version: 0,
            to_version: store.version(),
            add: store.expressions().map(str::to_string).collect(),
            remove: Vec::new(),
        }
    }

    pub fn into_store(self) -> Result<PrefixStore, StoreError> {
        if self.format != SNAPSHOT_FORMAT || self.v != SNAPSHOT_FORMAT_VERSION {
            return Err(StoreError::CorruptSnapshot(format!(
                "unrecognized format {:?} v{}",
                self.format, self.v
            )));
        }
        if self.from_version != 0 || !self.remove.is_empty() {
            return Err(StoreError::CorruptSnapshot(
                "snapshot files must be full snapshots".to_string(),
            ));
        }
        if self.to_version == 0 {
            // Version 0 means "no list loaded yet"; only the empty store
            // serializes that way.
            return if self.add.is_empty() {
                Ok(PrefixStore::empty())
            } else {
                Err(StoreError::CorruptSnapshot(
                    "version 0 snapshot with expressions".to_string(),
                ))
            };
        }
        PrefixStore::empty()
            .apply_update(&ListUpdate::snapshot(self.to_version, self.add))
            .map_err(|e| match e {
                StoreError::InvalidExpression(expr) => {
                    StoreError::CorruptSnapshot(format!("invalid expression {expr:?}"))
                }
                other => other,
            })
    }
}

/// Write a snapshot file for an update (used by `trackguard compile`).
pub fn write_snapshot(update: &ListUpdate, path: &Path) -> Result<(), std::io::Error> {
    let file = SnapshotFile::from_update(update);
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)
}

/// Load a snapshot file into a store.
pub fn load_snapshot(path: &Path) -> Result<PrefixStore, ListError> {
    let bytes = std::fs::read(path).map_err(|e| {
        ListError::Store(StoreError::CorruptSnapshot(format!(
            "{}: {e}",
            path.display()
        )))
    })?;
    Ok(PrefixStore::deserialize(&bytes)?)
}

fn schema_err(path: &str, message: &str) -> ListError {
    ListError::Schema {
        path: path.to_string(),
        message: message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_categories_empty_list() {
        let list = parse_disconnect(r#"{"categories":{}}"#, &CategoryFilter::default()).unwrap();
        assert!(list.is_empty());
    }

    #[test]
    fn extracts_entity_domains() {
        let doc = r#"{"categories":{"Advertising":[
            {"Tracker Co":{"http://tracker.example/":["tracker.example","cdn.tracker.example"]}}
        ]}}"#;
        let list = parse_disconnect(doc, &CategoryFilter::default()).unwrap();
        assert_eq!(list.len(), 2);
        assert!(list.domains.contains("tracker.example"));
        assert!(list.domains.contains("cdn.tracker.example"));
    }

    #[test]
    fn duplicate_across_categories_appears_once() {
        let doc = r#"{"categories":{
            "Advertising":[{"A":{"http://a.example/":["dup.example"]}}],
            "Analytics":[{"B":{"http://b.example/":["dup.example"]}}]
        }}"#;
        let list = parse_disconnect(doc, &CategoryFilter::default()).unwrap();
        assert_eq!(list.len(), 1);
    }

    #[test]
    fn content_category_excluded_by_default() {
        let doc = r#"{"categories":{
            "Content":[{"Widget":{"http://w.example/":["widget.example"]}}],
            "Analytics":[{"B":{"http://b.example/":["metrics.example"]}}]
        }}"#;
        let list = parse_disconnect(doc, &CategoryFilter::default()).unwrap();
        assert_eq!(list.len(), 1);
        assert!(list.domains.contains("metrics.example"));

        let all = parse_disconnect(doc, &CategoryFilter::all()).unwrap();
        assert_eq!(all.len(), 2);
    }

    #[test]
    fn schema_errors_carry_paths() {
        let err = parse_disconnect(r#"{"nope":1}"#, &CategoryFilter::default()).unwrap_err();
        assert!(matches!(err, ListError::Schema { ref path, .. } if path == "$"));

        let err = parse_disconnect(r#"{"categories":{"Ads":{}}}"#, &CategoryFilter::default())
            .unwrap_err();
        assert!(matches!(err, ListError::Schema { ref path, .. } if path == "categories.Ads"));

        let doc = r#"{"categories":{"Ads":[{"E":{"http://e/":["ok.example",42]}}]}}"#;
        let err = parse_disconnect(doc, &CategoryFilter::default()).unwrap_err();
        assert!(
            matches!(err, ListError::Schema { ref path, .. } if path.ends_with("[1]")),
            "{err:?}"
        );
    }

    #[test]
    fn plain_text_parses_comments_and_case() {
        let list = parse_plain("# c\n\ntracker.example\n").unwrap();
        assert_eq!(list.len(), 1);
        assert!(list.domains.contains("tracker.example"));

        let list = parse_plain("Tracker.Example").unwrap();
        assert!(list.domains.contains("tracker.example"));
    }

    #[test]
    fn plain_text_reports_line_numbers() {
        let err = parse_plain("bad domain").unwrap_err();
        assert!(matches!(err, ListError::InvalidDomain { line: 1, .. }));

        let err = parse_plain("ok.example\n\n# fine\nbad domain\n").unwrap_err();
        assert!(matches!(err, ListError::InvalidDomain { line: 4, .. }));
    }

    #[test]
    fn compile_emits_domain_scoped_snapshot() {
        let empty = DomainList {
            name: "t".into(),
            source_format: SourceFormat::PlainText,
            domains: BTreeSet::new(),
        };
        let snap = compile(&empty);
        assert!(snap.is_snapshot());
        assert!(snap.add.is_empty());

        let one = DomainList {
            name: "t".into(),
            source_format: SourceFormat::PlainText,
            domains: BTreeSet::from(["tracker.example".to_string()]),
        };
        let snap = compile(&one);
        assert_eq!(snap.add, vec!["tracker.example/"]);
    }

    #[test]
    fn compile_parse_deterministic() {
        let text = "b.example\na.example\n# comment\na.example\n";
        let a = compile(&parse_plain(text).unwrap());
        let b = compile(&parse_plain(text).unwrap());
        let store_a = PrefixStore::build(&a.add).unwrap();
        let store_b = PrefixStore::build(&b.add).unwrap();
        assert_eq!(store_a.serialize(), store_b.serialize());
    }

    #[test]
    fn snapshot_file_round_trip_through_disk_format() {
        let list = parse_plain("a.example\nb.example\n").unwrap();
        let update = compile_versioned(&list, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        write_snapshot(&update, &path).unwrap();
        let store = load_snapshot(&path).unwrap();
        assert_eq!(store.version(), 7);
        assert_eq!(store.expression_count(), 2);
    }

    #[test]
    fn curated_scale_list_compiles_whole() {
        // A curated list of ~1500 domains compiles to one expression per
        // domain and builds a store of the same cardinality.
        let mut doc = String::from(r#"{"categories":{"Advertising":["#);
        for i in 0..1500 {
            if i > 0 {
                doc.push(',');
            }
            doc.push_str(&format!(
                r#"{{"Entity{i}":{{"http://e{i}.example/":["t{i:04}.example"]}}}}"#
            ));
        }
        doc.push_str("]}}");
        let list = parse_disconnect(&doc, &CategoryFilter::default()).unwrap();
        assert_eq!(list.len(), 1500);
        let snapshot = compile(&list);
        assert_eq!(snapshot.add.len(), 1500);
        let store = PrefixStore::build(&snapshot.add).unwrap();
        assert_eq!(store.expression_count(), 1500);
    }

    #[test]
    fn snapshot_file_rejects_foreign_format() {
        let err = PrefixStore::deserialize(
            br#"{"format":"other","v":1,"from_version":0,"to_version":1,"add":[],"remove":[]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, StoreError::CorruptSnapshot(_)));
    }
}
