//! `tvcache`: run the server, inspect graphs, check sandbox backends and
//! drive benchmarks.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 connection,
//! 4 check failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use tvcache_bench::run::{compare, run, RunOptions};
use tvcache_bench::sweep::{latency_sweep, SweepConfig};
use tvcache_bench::workload::{generate, WorkloadSpec};
use tvcache_bench::BenchReport;
use tvcache_core::cache::{CacheError, ToolCache};
use tvcache_core::sandbox::{contract_suite, Registry};
use tvcache_core::snapshot::SnapshotPolicy;
use tvcache_core::tcg::{export_dot, restore_from_file};
use tvcache_server::golden::{generate as golden, write_jsonl};
use tvcache_server::{start_shards, HttpCache, ServerConfig, ShardStats};

#[derive(Parser)]
#[command(name = "tvcache", version, about = "Trajectory-keyed tool value cache")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the cache server (all shards in this process).
    Serve(ServeArgs),
    /// Per-task node, snapshot and hit counts.
    Inspect(RemoteArgs),
    /// Write a task graph as DOT, from a server or a persisted graph file.
    ExportDot(ExportArgs),
    /// Print server statistics.
    Stats(RemoteArgs),
    /// Force a persistence cycle on every shard.
    PersistNow(RemoteArgs),
    /// Run the sandbox contract suite against a reference backend.
    ContractCheck(ContractArgs),
    /// Write the reference executor's golden trace as JSON lines.
    GoldenTrace(GoldenArgs),
    /// Workload replay and latency benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct ServeArgs {
    /// TOML config file; environment variables and flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    persist_dir: Option<PathBuf>,
    #[arg(long)]
    persist_interval_s: Option<f64>,
    /// Snapshot budget per task.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    lease_ttl_s: Option<f64>,
    #[arg(long)]
    max_inflight: Option<usize>,
    /// "-" for stderr or a file path.
    #[arg(long)]
    request_log: Option<String>,
}

#[derive(Args)]
struct RemoteArgs {
    /// Shard base URLs, comma separated, in shard order.
    #[arg(long, default_value = "http://127.0.0.1:7070", value_delimiter = ',')]
    server: Vec<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, value_delimiter = ',')]
    server: Vec<String>,
    #[arg(long, required_unless_present = "file")]
    task: Option<String>,
    /// Persisted graph file to read instead of a server.
    #[arg(long, conflicts_with = "server")]
    file: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ContractArgs {
    /// file_tree, broken_read or query.
    #[arg(long, default_value = "file_tree")]
    backend: String,
    #[arg(long, default_value_t = 50)]
    workloads: u64,
    #[arg(long, default_value_t = 40)]
    ops: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GoldenArgs {
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Replay a workload spec and write a report.
    Run(BenchRunArgs),
    /// Open-loop /get latency at each rate and shard count.
    Sweep(SweepArgs),
    /// Speedup table from a cached and an uncached report.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct BenchRunArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, overrides_with = "no_cache")]
    cached: bool,
    #[arg(long = "no-cache")]
    no_cache: bool,
    #[arg(long, value_parser = parse_policy, default_value = "selective")]
    policy: SnapshotPolicy,
    /// Run against these shards instead of an in-process cache.
    #[arg(long, value_delimiter = ',')]
    server: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,64,256")]
    rps: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    shards: Vec<usize>,
    #[arg(long, default_value_t = 10.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 8192)]
    corpus: usize,
    #[arg(long, default_value_t = 32)]
    workers: usize,
    #[arg(long, default_value_t = 10.0)]
    p95_budget_ms: f64,
    /// JSON output file; a CSV with the same rows is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<SnapshotPolicy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown policy {s:?}"))
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Connection(String),
    CheckFailed(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Connection(_) => 3,
            CliError::CheckFailed(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Connection(m) | CliError::CheckFailed(m) | CliError::Other(m) => m,
        }
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        match e {
            CacheError::Unavailable(m) => CliError::Connection(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Other(format!("{}: {e}", path.display()))
}

fn client(server: &[String]) -> Result<HttpCache, CliError> {
    if server.is_empty() {
        return Err(CliError::Usage("--server needs at least one URL".into()));
    }
    Ok(HttpCache::new(server.to_vec(), Duration::from_secs(10), 1))
}

fn all_stats(http: &HttpCache) -> Result<Vec<ShardStats>, CliError> {
    (0..http.endpoints().len()).map(|i| http.stats(i).map_err(CliError::from)).collect()
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializes"));
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let mut config = match &a.config {
        Some(p) => ServerConfig::from_file(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ServerConfig::default(),
    };
    config.apply_env().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(v) = a.listen {
        config.listen = v;
    }
    if let Some(v) = a.shards {
        config.shard_count = v;
    }
    if let Some(v) = a.persist_dir {
        config.persist_dir = Some(v);
    }
    if let Some(v) = a.persist_interval_s {
        config.persist_interval_s = v;
    }
    if let Some(v) = a.budget {
        config.default_snapshot_budget = v;
    }
    if let Some(v) = a.lease_ttl_s {
        config.lease_ttl_s = v;
    }
    if let Some(v) = a.max_inflight {
        config.max_inflight = v;
    }
    if a.request_log.is_some() {
        config.request_log = a.request_log;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let shards = start_shards(&config).map_err(|e| CliError::Other(e.to_string()))?;
    for s in &shards {
        println!("shard {} listening on {}", s.state().index(), s.url());
    }
    tvcache_server::wait_for_shutdown_signal();
    drop(shards);
    Ok(())
}

fn inspect(a: RemoteArgs) -> Result<(), CliError> {
    let http = client(&a.server)?;
    let mut rows = serde_json::Map::new();
    for s in all_stats(&http)? {
        for (task, t) in s.cache.tasks {
            rows.insert(
                task,
                serde_json::json!({
                    "shard": s.shard,
                    "nodes": t.nodes,
                    "snapshots": t.snapshots,
                    "hits": t.counters.hits,
                    "misses": t.counters.misses,
                    "hit_rate": t.hit_rate,
                    "active_leases": t.active_leases,
                }),
            );
        }
    }
    if a.json {
        print_json(&rows);
    } else {
        println!("{:<32}{:>6}{:>8}{:>10}{:>8}{:>8}{:>9}", "task", "shard", "nodes", "snapshots", "hits", "misses", "hit_rate");
        for (task, r) in &rows {
            let n = |k: &str| r[k].as_u64().unwrap_or(0);
            println!(
                "{:<32}{:>6}{:>8}{:>10}{:>8}{:>8}{:>9.3}",
                task,
                n("shard"),
                n("nodes"),
                n("snapshots"),
                n("hits"),
                n("misses"),
                r["hit_rate"].as_f64().unwrap_or(0.0)
            );
        }
    }
    Ok(())
}

fn stats(a: RemoteArgs) -> Result<(), CliError> {
    let http = client(&a.server)?;
    let stats = all_stats(&http)?;
    if a.json {
        print_json(&stats);
        return Ok(());
    }
    for s in &stats {
        let g = &s.cache.global;
        println!("shard {}/{}", s.shard, s.shard_count);
        println!("  tasks {}  nodes {}  snapshots {}  leases {}", s.cache.tasks.len(), g.nodes, g.snapshots, g.active_leases);
        println!(
            "  hits {}  misses {}  hit_rate {:.3}  lpm_hits {}  evictions {}  leaked_leases {}",
            g.counters.hits, g.counters.misses, g.hit_rate, g.counters.lpm_hits, g.counters.evictions, g.counters.leaked_leases
        );
        let p = &s.persistence;
        println!("  persist cycles {}  written {}  failures {}  restored {}  corrupt {}", p.cycles, p.written, p.failures, p.restored, p.corrupt);
        println!("  inflight {}  rejected {}", s.inflight, s.rejected);
    }
    Ok(())
}

fn persist_now(a: RemoteArgs) -> Result<(), CliError> {
    let http = client(&a.server)?;
    let mut failed = 0;
    for i in 0..http.endpoints().len() {
        let r = http.persist_now(i)?;
        failed += r.failed;
        if a.json {
            print_json(&r);
        } else {
            println!("shard {i}: wrote {} graphs, {} failed", r.written, r.failed);
        }
    }
    if failed > 0 {
        return Err(CliError::CheckFailed(format!("{failed} graphs failed to persist")));
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<(), CliError> {
    let dot = match (&a.file, &a.task) {
        (Some(path), _) => {
            let g = restore_from_file(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
            export_dot(&g)
        }
        (None, Some(task)) => {
            let server = if a.server.is_empty() { vec!["http://127.0.0.1:7070".to_string()] } else { a.server.clone() };
            client(&server)?.graph(task)?.ok_or_else(|| CliError::Other(format!("unknown task {task:?}")))?
        }
        (None, None) => return Err(CliError::Usage("--task or --file is required".into())),
    };
    std::fs::write(&a.out, dot).map_err(io_err(&a.out))
}

fn contract(a: ContractArgs) -> Result<(), CliError> {
    let registry = Registry::with_reference_backends();
    let backend = registry.get(&a.backend).ok_or_else(|| {
        CliError::Usage(format!("unknown backend {:?}; known: {}", a.backend, registry.kinds().collect::<Vec<_>>().join(", ")))
    })?;
    let report = contract_suite(backend.as_ref(), a.workloads, a.ops, a.seed);
    if a.json {
        print_json(&report);
    } else {
        for p in &report.properties {
            let verdict = if p.passed() { "ok" } else { "FAILED" };
            println!("{:<48}{:>8} checks  {verdict}", p.name, p.checks);
            if let Some(f) = &p.first_failure {
                println!("    first failure: {f}");
            }
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("backend {} violates the sandbox contract", a.backend)))
    }
}

fn read_report(path: &Path) -> Result<BenchReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_vec_pretty(v).expect("serializes")).map_err(io_err(path))
}

fn bench(cmd: BenchCommand) -> Result<(), CliError> {
    match cmd {
        BenchCommand::Run(a) => {
            if a.cached == a.no_cache {
                return Err(CliError::Usage("pass exactly one of --cached or --no-cache".into()));
            }
            let text = std::fs::read_to_string(&a.spec).map_err(io_err(&a.spec))?;
            let spec = WorkloadSpec::from_json(&text).map_err(|e| CliError::Usage(e.to_string()))?;
            let cache: Option<Arc<dyn ToolCache>> = if a.server.is_empty() {
                None
            } else {
                let http = client(&a.server)?;
                http.stats(0)?;
                Some(Arc::new(http))
            };
            let opts = RunOptions { cached: a.cached, policy: a.policy, cache, ..Default::default() };
            let result = run(&generate(&spec), &opts).map_err(|e| CliError::CheckFailed(e.to_string()))?;
            write_json(&a.out, &result.report)?;
            let r = &result.report;
            println!(
                "{} tool calls, hit rate {:.3}, median {:.3} ms, mean {:.3} ms",
                r.tool_calls, r.hit_rate, r.median_tool_ms, r.mean_tool_ms
            );
            Ok(())
        }
        BenchCommand::Sweep(a) => {
            let cfg = SweepConfig {
                rps_levels: a.rps,
                shard_counts: a.shards,
                corpus_keys: a.corpus,
                duration: Duration::from_secs_f64(a.duration_s),
                workers: a.workers,
                p95_budget_ms: a.p95_budget_ms,
                seed: 0,
            };
            let cells = latency_sweep(&cfg).map_err(|e| CliError::Other(e.to_string()))?;
            let mut csv = String::from("shards,offered_rps,achieved_rps,requests,errors,p50_ms,p95_ms,p99_ms,saturated\n");
            for c in &cells {
                csv.push_str(&format!(
                    "{},{},{:.2},{},{},{:.3},{:.3},{:.3},{}\n",
                    c.shards, c.offered_rps, c.achieved_rps, c.requests, c.errors, c.p50_ms, c.p95_ms, c.p99_ms, c.saturated
                ));
            }
            print!("{csv}");
            if let Some(out) = a.out {
                write_json(&out, &cells)?;
                let csv_path = out.with_extension("csv");
                std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
            }
            Ok(())
        }
        BenchCommand::Compare { a, b, json } => {
            let c = compare(&read_report(&a)?, &read_report(&b)?).map_err(|e| CliError::Usage(e.to_string()))?;
            if json {
                print_json(&c);
            } else {
                print!("{}", c.table());
            }
            if c.identical_results {
                Ok(())
            } else {
                Err(CliError::CheckFailed("cached and uncached runs returned different results".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if matches!(cli.command, Command::Serve(_) | Command::Bench(_)) {
        tracing_subscriber::fmt()
            .with_writer(std::io::stderr)
            .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
            .with_env_filter(
                tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
            )
            .init();
    }
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Inspect(a) => inspect(a),
        Command::ExportDot(a) => export(a),
        Command::Stats(a) => stats(a),
        Command::PersistNow(a) => persist_now(a),
        Command::ContractCheck(a) => contract(a),
        Command::GoldenTrace(a) => {
            let out = a.out.clone();
            std::fs::File::create(&out)
                .map(std::io::BufWriter::new)
                .and_then(|f| write_jsonl(&golden(a.cases, a.seed), f))
                .map_err(io_err(&out))
        }
        Command::Bench(c) => bench(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tvcache: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
