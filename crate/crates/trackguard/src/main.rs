//! trackguard command line: compile blocklists, run the filtering proxy,
//! serve deterministic fixtures, and measure sites through a proxy pair.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use trackguard::fixture::{CorpusSpec, Fixture, FixtureAdmin};
use trackguard::harness::{self, FetchOptions, ProxyEndpoints};
use trackguard::list::{self, CategoryFilter};
use trackguard::proxy::{Engine, Proxy, ProxyConfig};
use trackguard::store::PrefixStore;
use trackguard::update::Updater;

#[derive(Parser)]
#[command(name = "trackguard", version, about = "Tracking-protection engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a blocklist into a snapshot file.
    Compile(CompileArgs),
    /// Run the filtering forward proxy.
    Proxy(ProxyArgs),
    /// Serve a deterministic fixture corpus.
    Fixture(FixtureArgs),
    /// Measure sites through a protected and an unprotected proxy.
    Measure(MeasureArgs),
}

#[derive(Args)]
struct CompileArgs {
    /// Input list file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Input format: "disconnect" or "plain".
    #[arg(long, default_value = "disconnect")]
    format: String,
    /// Categories to skip (disconnect format). Defaults to "Content".
    #[arg(long = "exclude-category")]
    exclude_category: Vec<String>,
    /// Include every category, overriding the default exclusion.
    #[arg(long)]
    all_categories: bool,
    /// Snapshot version to stamp.
    #[arg(long, default_value_t = 1)]
    to_version: u64,
    /// Output snapshot path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProxyArgs {
    #[arg(long, default_value = "127.0.0.1:8888")]
    listen: String,
    /// Snapshot to load. Without it the proxy starts with an empty store
    /// and forwards everything (the unprotected A/B instance).
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// List update endpoint, e.g. http://127.0.0.1:9001/list
    #[arg(long)]
    update_url: Option<String>,
    /// Update cadence, e.g. "45m", "90s".
    #[arg(long, default_value = "45m")]
    update_interval: String,
    /// Exempt subresources that share the page's registrable domain.
    /// Accepts --third-party-only or --third-party-only=false.
    #[arg(
        long,
        action = clap::ArgAction::Set,
        num_args = 0..=1,
        default_value_t = false,
        default_missing_value = "true"
    )]
    third_party_only: bool,
    /// Control API bind address.
    #[arg(long, default_value = "127.0.0.1:8899")]
    control: String,
    /// Status used for refused requests.
    #[arg(long, default_value_t = 403)]
    block_status: u16,
    /// Upstream override "host=ip:port" (repeatable; fixture routing).
    #[arg(long = "resolve")]
    resolve: Vec<String>,
    /// Fetch the upstream override map from a fixture admin endpoint,
    /// e.g. http://127.0.0.1:9000/map
    #[arg(long)]
    resolve_map_url: Option<String>,
    /// Override persistence file.
    #[arg(long)]
    overrides_file: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    /// Admin address (serves /map, /stats, /reset).
    #[arg(long, default_value = "127.0.0.1:9000")]
    listen: String,
    /// Corpus spec JSON.
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Args)]
struct MeasureArgs {
    /// File with one site URL per line.
    #[arg(long)]
    sites: PathBuf,
    #[arg(long, default_value_t = 10)]
    reps: u32,
    /// Protected proxy address.
    #[arg(long, default_value = "127.0.0.1:8888")]
    proxy: String,
    /// Control API of the protected proxy.
    #[arg(long, default_value = "127.0.0.1:8899")]
    proxy_control: String,
    /// Unprotected (empty-store) proxy address.
    #[arg(long)]
    unprotected: String,
    /// Control API of the unprotected proxy.
    #[arg(long)]
    unprotected_control: String,
    /// Output directory for reports.
    #[arg(long)]
    out: PathBuf,
    /// Concurrent subresource fetches per host.
    #[arg(long, default_value_t = 6)]
    parallelism: usize,
    /// Acknowledge measuring live web sites (results are not
    /// reproducible; fixture corpora are).
    #[arg(long, default_value_t = false)]
    live: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile(args) => run_compile(args),
        Command::Proxy(args) => block_on(run_proxy(args)),
        Command::Fixture(args) => block_on(run_fixture(args)),
        Command::Measure(args) => block_on(run_measure(args)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn block_on<F: std::future::Future<Output = Result<(), String>>>(fut: F) -> Result<(), String> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?
        .block_on(fut)
}

fn run_compile(args: CompileArgs) -> Result<(), String> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| format!("reading {}: {e}", args.input.display()))?;
    let list = match args.format.as_str() {
        "disconnect" => {
            let filter = if args.all_categories {
                CategoryFilter::all()
            } else if args.exclude_category.is_empty() {
                CategoryFilter::default()
            } else {
                CategoryFilter::excluding(args.exclude_category.clone())
            };
            list::parse_disconnect(&text, &filter).map_err(|e| e.to_string())?
        }
        "plain" => list::parse_plain(&text).map_err(|e| e.to_string())?,
        other => return Err(format!("unknown format {other:?} (disconnect|plain)")),
    };
    let update = list::compile_versioned(&list, args.to_version);
    list::write_snapshot(&update, &args.out)
        .map_err(|e| format!("writing {}: {e}", args.out.display()))?;
    println!(
        "compiled {} {} domains -> {} ({} expressions, version {})",
        list.len(),
        list.source_format,
        args.out.display(),
        update.add.len(),
        args.to_version
    );
    Ok(())
}

fn parse_interval(text: &str) -> Result<Duration, String> {
    let text = text.trim();
    let (digits, unit) = text.split_at(
        text.find(|c: char| !c.is_ascii_digit())
            .unwrap_or(text.len()),
    );
    let n: u64 = digits
        .parse()
        .map_err(|_| format!("bad interval {text:?}"))?;
    let secs = match unit {
        "" | "s" => n,
        "m" => n * 60,
        "h" => n * 3600,
        _ => return Err(format!("bad interval unit {unit:?} (s|m|h)")),
    };
    if secs == 0 {
        return Err("interval must be positive".to_string());
    }
    Ok(Duration::from_secs(secs))
}

fn parse_resolve(entries: &[String]) -> Result<HashMap<String, String>, String> {
    let mut map = HashMap::new();
    for entry in entries {
        let (host, addr) = entry
            .split_once('=')
            .ok_or_else(|| format!("bad --resolve {entry:?}, expected host=ip:port"))?;
        map.insert(host.to_string(), addr.to_string());
    }
    Ok(map)
}

async fn fetch_resolve_map(url: &str) -> Result<HashMap<String, String>, String> {
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| format!("resolve map URL must be http://, got {url:?}"))?;
    let (addr, path) = rest.split_once('/').unwrap_or((rest, ""));
    let mut head = trackguard::http1::RequestHead::new("GET", &format!("/{path}"));
    head.headers.push("Host", addr);
    head.headers.push("Connection", "close");
    let response = trackguard::http1::fetch(addr, &head)
        .await
        .map_err(|e| format!("fetching resolve map: {e}"))?;
    if response.head.status != 200 {
        return Err(format!(
            "resolve map endpoint returned {}",
            response.head.status
        ));
    }
    serde_json::from_slice(&response.body).map_err(|e| format!("bad resolve map: {e}"))
}

async fn run_proxy(args: ProxyArgs) -> Result<(), String> {
    let store = match &args.snapshot {
        Some(path) => {
            let store = list::load_snapshot(path).map_err(|e| e.to_string())?;
            log::info!(
                "loaded snapshot {} (version {}, {} expressions)",
                path.display(),
                store.version(),
                store.expression_count()
            );
            store
        }
        None => {
            log::warn!("no snapshot given: protection off, proxy is a transparent relay");
            PrefixStore::empty()
        }
    };

    let mut resolve = parse_resolve(&args.resolve)?;
    if let Some(map_url) = &args.resolve_map_url {
        let fetched = fetch_resolve_map(map_url).await?;
        log::info!("resolve map: {} hosts from {map_url}", fetched.len());
        resolve.extend(fetched);
    }

    let config = ProxyConfig {
        listen: args.listen.clone(),
        third_party_only: args.third_party_only,
        block_status: args.block_status,
        control: Some(args.control.clone()),
        resolve,
        overrides_path: args.overrides_file.clone(),
    };
    let engine = Engine::new(store, config)?;

    if let Some(endpoint) = &args.update_url {
        let interval = parse_interval(&args.update_interval)?;
        let updater = Updater::new(endpoint.clone(), interval, engine.store.clone());
        engine.attach_updater(updater.clone());
        tokio::spawn(updater.run());
        log::info!("list updates from {endpoint} every {}s", interval.as_secs());
    } else if args.update_interval != "45m" {
        log::warn!("--update-interval has no effect without --update-url");
    }

    let control = trackguard::control::ControlApi::bind(engine.clone(), &args.control)
        .await
        .map_err(|e| format!("binding control API {}: {e}", args.control))?;
    log::info!("control API on {}", args.control);
    tokio::spawn(control.run());

    let proxy = Proxy::bind(engine)
        .await
        .map_err(|e| format!("binding {}: {e}", args.listen))?;
    log::info!("filtering proxy on {}", args.listen);
    proxy.run().await.map_err(|e| e.to_string())
}

async fn run_fixture(args: FixtureArgs) -> Result<(), String> {
    let text = std::fs::read_to_string(&args.spec)
        .map_err(|e| format!("reading {}: {e}", args.spec.display()))?;
    let spec = CorpusSpec::from_json(&text)?;
    let fixture = Arc::new(
        Fixture::start(&spec)
            .await
            .map_err(|e| format!("starting fixture: {e}"))?,
    );
    println!("fixture hosts:");
    for (host, addr) in fixture.resolve_map() {
        println!("  {host} -> {addr}");
    }
    let admin = FixtureAdmin::bind(fixture, &args.listen)
        .await
        .map_err(|e| format!("binding {}: {e}", args.listen))?;
    println!("admin on http://{}/map /stats /reset", args.listen);
    admin.run().await.map_err(|e| e.to_string())
}

async fn run_measure(args: MeasureArgs) -> Result<(), String> {
    let text = std::fs::read_to_string(&args.sites)
        .map_err(|e| format!("reading {}: {e}", args.sites.display()))?;
    let sites: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if sites.is_empty() {
        return Err("no sites to measure".to_string());
    }
    if !args.live {
        log::info!(
            "measuring {} sites (fixture mode; pass --live when pointing at the open web)",
            sites.len()
        );
    }

    let protected = ProxyEndpoints {
        proxy: args.proxy.clone(),
        control: args.proxy_control.clone(),
    };
    let unprotected = ProxyEndpoints {
        proxy: args.unprotected.clone(),
        control: args.unprotected_control.clone(),
    };
    let opts = FetchOptions {
        per_host_parallelism: args.parallelism,
        ..FetchOptions::default()
    };

    let mut comparisons = Vec::new();
    for site in &sites {
        match harness::compare(site, args.reps, &protected, &unprotected, &opts).await {
            Ok(cmp) => {
                log::info!(
                    "{site}: trackers {} | load {:.0}ms vs {:.0}ms | bytes {:.0} vs {:.0}",
                    cmp.trackers_blocked,
                    cmp.median_protected.load_time_ms,
                    cmp.median_unprotected.load_time_ms,
                    cmp.median_protected.bytes,
                    cmp.median_unprotected.bytes,
                );
                comparisons.push(cmp);
            }
            Err(e) => log::warn!("{site}: skipped ({e})"),
        }
    }
    if comparisons.is_empty() {
        return Err("every site failed".to_string());
    }
    let report = harness::aggregate(&comparisons);
    harness::write_report(&report, &args.out)
        .map_err(|e| format!("writing {}: {e}", args.out.display()))?;
    println!(
        "measured {} sites -> {}",
        comparisons.len(),
        args.out.display()
    );
    println!(
        "median trackers blocked: {}; median load-time reduction: {}; median data reduction: {}",
        report.median_trackers_blocked,
        report
            .median_load_time_reduction
            .map(|r| format!("{:.1}%", r * 100.0))
            .unwrap_or_else(|| "n/a".into()),
        report
            .median_bytes_reduction
            .map(|r| format!("{:.1}%", r * 100.0))
            .unwrap_or_else(|| "n/a".into()),
    );
    println!(
        "cookies: protected {} vs unprotected {} ({})",
        report.cookies_protected_total,
        report.cookies_unprotected_total,
        report
            .cookie_reduction
            .map(|r| format!("-{:.1}%", r * 100.0))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(())
}
