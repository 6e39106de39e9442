//! Measurement harness: fetch sites with and without protection, count
//! blocked elements, cookies, bytes and load time, and report medians and
//! CDFs per site and for the corpus.

pub mod extract;
pub mod fetch;
pub mod report;

pub use extract::extract_subresources;
pub use fetch::{
    compare, count_cookies, fetch_page, median, reduction, CookieKey, FetchOptions, FetchReport,
    HarnessError, ProxyEndpoints, SiteComparison,
};
pub use report::{aggregate, cdf, write_report, CdfPoint, CorpusReport};
