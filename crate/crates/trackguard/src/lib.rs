//! Tracking-protection engine.
//!
//! Blocks outgoing HTTP requests to known tracking domains the way a
//! browser-integrated blocker would: URLs are canonicalized and expanded
//! into host-suffix/path-prefix expressions, matched against a versioned
//! hash-prefix store compiled from a curated domain list, and enforced by
//! a filtering forward proxy. A measurement harness fetches pages with
//! and without protection and reports blocked elements, cookie counts,
//! load times, and data usage.

pub mod canonical;
pub mod control;
pub mod fixture;
pub mod harness;
pub mod http1;
pub mod list;
pub mod policy;
pub mod proxy;
pub mod psl;
pub mod session;
pub mod store;
pub mod update;

pub use canonical::CanonicalUrl;
pub use policy::{Decision, DecisionReason, ElementHint, RequestKind, RequestMeta, Verdict};
pub use store::{ListUpdate, MatchResult, PrefixStore};
