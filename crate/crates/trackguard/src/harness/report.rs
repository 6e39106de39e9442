//! Corpus-level aggregation and report output.
//!
//! Rolls per-site comparisons into CDFs (trackers per site, load-time
//! reduction, data reduction), corpus medians, and cookie-store totals
//! per configuration, then writes them as CSV and JSON.

use std::io;
use std::path::Path;

use serde::Serialize;

use crate::harness::fetch::{count_cookies, median, reduction, SiteComparison};

/// One step of an empirical CDF: fraction of values <= `value`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfPoint {
    pub value: f64,
    pub cumulative_fraction: f64,
}

/// Sorted values with cumulative fractions (i+1)/n: starts at
/// (min, 1/n), ends at (max, 1), never decreases.
pub fn cdf(values: &[f64]) -> Vec<CdfPoint> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("comparable values"));
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, value)| CdfPoint {
            value,
            cumulative_fraction: (i + 1) as f64 / n,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SiteRow {
    pub site: String,
    pub reps: u32,
    pub trackers_blocked: f64,
    pub load_time_ms_protected: f64,
    pub load_time_ms_unprotected: f64,
    pub bytes_protected: f64,
    pub bytes_unprotected: f64,
    pub requests_protected: f64,
    pub requests_unprotected: f64,
    pub cookies_protected: f64,
    pub cookies_unprotected: f64,
    pub load_time_reduction: Option<f64>,
    pub bytes_reduction: Option<f64>,
    pub requests_reduction: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusReport {
    pub sites: Vec<SiteRow>,
    pub cdf_trackers: Vec<CdfPoint>,
    pub cdf_load_time_reduction: Vec<CdfPoint>,
    pub cdf_bytes_reduction: Vec<CdfPoint>,
    /// Corpus medians over per-site values.
    pub median_trackers_blocked: f64,
    pub median_load_time_reduction: Option<f64>,
    pub median_bytes_reduction: Option<f64>,
    /// Cookie-store totals per configuration (union across the corpus).
    pub cookies_protected_total: usize,
    pub cookies_unprotected_total: usize,
    pub cookie_reduction: Option<f64>,
}

/// Aggregate per-site comparisons into the corpus report.
pub fn aggregate(comparisons: &[SiteComparison]) -> CorpusReport {
    assert!(!comparisons.is_empty(), "aggregate needs at least one site");
    let sites: Vec<SiteRow> = comparisons
        .iter()
        .map(|c| SiteRow {
            site: c.site.clone(),
            reps: c.reps,
            trackers_blocked: c.trackers_blocked,
            load_time_ms_protected: c.median_protected.load_time_ms,
            load_time_ms_unprotected: c.median_unprotected.load_time_ms,
            bytes_protected: c.median_protected.bytes,
            bytes_unprotected: c.median_unprotected.bytes,
            requests_protected: c.median_protected.requests,
            requests_unprotected: c.median_unprotected.requests,
            cookies_protected: c.median_protected.cookies,
            cookies_unprotected: c.median_unprotected.cookies,
            load_time_reduction: c.reductions.load_time,
            bytes_reduction: c.reductions.bytes,
            requests_reduction: c.reductions.requests,
        })
        .collect();

    let trackers: Vec<f64> = comparisons.iter().map(|c| c.trackers_blocked).collect();
    let load_reductions: Vec<f64> = comparisons
        .iter()
        .filter_map(|c| c.reductions.load_time)
        .collect();
    let byte_reductions: Vec<f64> = comparisons
        .iter()
        .filter_map(|c| c.reductions.bytes)
        .collect();

    let cookies_protected_total =
        count_cookies(comparisons.iter().flat_map(|c| c.protected_reports.iter()));
    let cookies_unprotected_total = count_cookies(
        comparisons
            .iter()
            .flat_map(|c| c.unprotected_reports.iter()),
    );

    CorpusReport {
        cdf_trackers: cdf(&trackers),
        cdf_load_time_reduction: cdf(&load_reductions),
        cdf_bytes_reduction: cdf(&byte_reductions),
        median_trackers_blocked: median(&trackers),
        median_load_time_reduction: if load_reductions.is_empty() {
            None
        } else {
            Some(median(&load_reductions))
        },
        median_bytes_reduction: if byte_reductions.is_empty() {
            None
        } else {
            Some(median(&byte_reductions))
        },
        cookies_protected_total,
        cookies_unprotected_total,
        cookie_reduction: reduction(
            cookies_unprotected_total as f64,
            cookies_protected_total as f64,
        ),
        sites,
    }
}

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}

fn write_cdf_csv(points: &[CdfPoint], path: &Path) -> io::Result<()> {
    let mut out = String::from("value,cumulative_fraction\n");
    for p in points {
        out.push_str(&format!("{:.6},{:.6}\n", p.value, p.cumulative_fraction));
    }
    std::fs::write(path, out)
}

/// Write the report files: sites.csv, cdf_trackers.csv, cdf_loadtime.csv,
/// cdf_bytes.csv, summary.json.
pub fn write_report(report: &CorpusReport, dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut sites_csv = String::from(
        "site,reps,trackers_blocked,load_time_ms_protected,load_time_ms_unprotected,\
         bytes_protected,bytes_unprotected,requests_protected,requests_unprotected,\
         cookies_protected,cookies_unprotected,load_time_reduction,bytes_reduction,\
         requests_reduction\n",
    );
    for row in &report.sites {
        sites_csv.push_str(&format!(
            "{},{},{},{:.3},{:.3},{:.0},{:.0},{:.1},{:.1},{:.1},{:.1},{},{},{}\n",
            row.site,
            row.reps,
            row.trackers_blocked,
            row.load_time_ms_protected,
            row.load_time_ms_unprotected,
            row.bytes_protected,
            row.bytes_unprotected,
            row.requests_protected,
            row.requests_unprotected,
            row.cookies_protected,
            row.cookies_unprotected,
            fmt_opt(row.load_time_reduction),
            fmt_opt(row.bytes_reduction),
            fmt_opt(row.requests_reduction),
        ));
    }
    std::fs::write(dir.join("sites.csv"), sites_csv)?;

    write_cdf_csv(&report.cdf_trackers, &dir.join("cdf_trackers.csv"))?;
    write_cdf_csv(
        &report.cdf_load_time_reduction,
        &dir.join("cdf_loadtime.csv"),
    )?;
    write_cdf_csv(&report.cdf_bytes_reduction, &dir.join("cdf_bytes.csv"))?;

    let mut summary = serde_json::to_vec_pretty(report)?;
    summary.push(b'\n');
    std::fs::write(dir.join("summary.json"), summary)
}
