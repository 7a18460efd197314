//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS/FAIL line each. The process fails on any FAIL, except for a
//! criterion whose stated host precondition (core count) is not met; that
//! one still prints FAIL with the reason. Set TVC_ACCEPTANCE_STRICT=1 to fail
//! on those too.

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::json;
use tvcache_bench::run::{expected_hits_strict, run, RunOptions};
use tvcache_bench::scenarios::{oracle_sets, refcount_schedule, snapshot_policy_audit, speedup, stateful_equivalence};
use tvcache_bench::sweep::{latency_sweep, load_corpus, max_sustained_rps, open_loop, start_local_shards, SweepConfig};
use tvcache_bench::workload::{generate, task_id, CostMix, LenRange, Rollout, WorkloadSpec};
use tvcache_core::cache::{Cache, CacheConfig, MatchMode, ToolCache};
use tvcache_core::executor::{fresh_execution, Executor, StatelessControlCache};
use tvcache_core::forkpool::{ForkPool, ForkPoolConfig};
use tvcache_core::sandbox::{Backend, FileTreeBackend, FileTreeConfig};
use tvcache_core::snapshot::{CostModel, SnapshotPolicy, SnapshotStore};
use tvcache_core::tcg::Trajectory;
use tvcache_server::HttpCache;

struct Outcome {
    pass: bool,
    detail: String,
    /// Host precondition that was not met, if any.
    unmet: Option<String>,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail, unmet: None }
    }
}

fn cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn needs_cores(min: usize) -> Option<String> {
    let n = cores();
    (n < min).then(|| format!("host has {n} core(s), criterion assumes >= {min}"))
}

fn correctness_oracle() -> Outcome {
    let t = Instant::now();
    let rep = oracle_sets(1000, 4, 8, 12, 20);
    let secs = t.elapsed().as_secs_f64();
    let pass = rep.sets == 1000 && rep.mismatches == 0 && rep.lease_imbalances == 0 && secs <= 300.0;
    Outcome::new(
        pass,
        format!(
            "{} sets, {} rollouts, {} calls, {} mismatches, {} lease imbalances, {secs:.1} s (limit 300){}",
            rep.sets,
            rep.rollouts,
            rep.calls,
            rep.mismatches,
            rep.lease_imbalances,
            rep.first_mismatch.map(|m| format!("; first: {m}")).unwrap_or_default()
        ),
    )
}

fn staleness_control() -> Outcome {
    let b = FileTreeBackend::default();
    let steps = vec![
        b.describe("write", &json!({"path": "foo", "content": "A"})).unwrap(),
        b.describe("read", &json!({"path": "foo"})).unwrap(),
        b.describe("append", &json!({"path": "foo", "content": "B"})).unwrap(),
        b.describe("read", &json!({"path": "foo"})).unwrap(),
    ];
    let backend: Arc<dyn Backend> = Arc::new(FileTreeBackend::default());
    let store = Arc::new(SnapshotStore::in_memory(u64::MAX, Arc::new(CostModel::default())));
    let pool = Arc::new(ForkPool::new(backend, store, ForkPoolConfig::default()));
    let exec = Executor::new(Arc::new(Cache::new(CacheConfig::default())), pool, SnapshotPolicy::Selective);
    let mut reads = Vec::new();
    for _ in 0..2 {
        let mut s = exec.start_rollout("stale", MatchMode::Strict);
        let r: Vec<_> = steps.iter().map(|d| exec.call_tool(&mut s, d)).collect();
        exec.end_rollout(s);
        reads.push((r[1].payload.clone(), r[3].payload.clone()));
    }
    let control = StatelessControlCache::new();
    let mut h = b.start().unwrap();
    let c: Vec<_> = steps.iter().map(|d| control.call(&b, &mut h, d)).collect();
    let tv_ok = reads.iter().all(|(first, second)| first == b"A" && second == b"AB");
    let control_stale = c[1].payload == b"A" && c[3].payload == b"A";
    Outcome::new(
        tv_ok && control_stale,
        format!(
            "cache reads {:?} then {:?} (fresh and cached passes agree: {}); control reads {:?} then {:?}",
            String::from_utf8_lossy(&reads[0].0),
            String::from_utf8_lossy(&reads[0].1),
            reads[0] == reads[1],
            String::from_utf8_lossy(&c[1].payload),
            String::from_utf8_lossy(&c[3].payload),
        ),
    )
}

fn hit_rate_arithmetic() -> Outcome {
    let t = Instant::now();
    let flat = WorkloadSpec { tasks: 4, rollouts_per_task: 8, epochs: 1, branch_prob: 0.0, seed: 5, ..Default::default() };
    let w = generate(&flat);
    let r = run(&w, &RunOptions::default()).expect("oracle gate");
    let hits = r.hit.iter().filter(|&&h| h).count() as u64;
    let calls = r.report.tool_calls;
    let exact = hits * 8 == calls * 7 && expected_hits_strict(&w).iter().sum::<u64>() == hits;

    let curve = WorkloadSpec {
        tasks: 128,
        rollouts_per_task: 8,
        epochs: 10,
        trajectory_len: LenRange { min: 6, max: 10 },
        branch_prob: 0.15,
        alternatives: 2,
        seed: 0,
        ..Default::default()
    };
    let by_epoch = run(&generate(&curve), &RunOptions::default()).expect("oracle gate").report.hit_rate_by_epoch;
    let rising = by_epoch.windows(2).filter(|p| p[1] >= p[0]).count();
    let secs = t.elapsed().as_secs_f64();
    let rates: Vec<String> = by_epoch.iter().map(|x| format!("{x:.3}")).collect();
    Outcome::new(
        exact && rising >= 8 && secs <= 120.0,
        format!(
            "b=0: {hits}/{calls} hits (7/8 = {}); b=0.15 epochs [{}]: {rising}/{} transitions non-decreasing (need 8); {secs:.1} s (limit 120)",
            calls * 7 / 8,
            rates.join(" "),
            by_epoch.len() - 1
        ),
    )
}

fn speedup_reproduction() -> Outcome {
    let t = Instant::now();
    let spec = WorkloadSpec {
        tasks: 4,
        rollouts_per_task: 8,
        epochs: 1,
        trajectory_len: LenRange { min: 6, max: 6 },
        branch_prob: 0.05,
        tool_cost: CostMix::bimodal(0.8, 5.0, 2000.0),
        seed: 1,
        ..Default::default()
    };
    let sandbox = FileTreeConfig { snapshot_ms: 50.0, restore_ms: 50.0, ..Default::default() };
    let r = speedup(&spec, sandbox).expect("oracle gate");
    let secs = t.elapsed().as_secs_f64();
    let pass = r.hit_rate >= 0.40
        && r.speedup >= 3.0
        && r.relative_error.abs() <= 0.25
        && r.identical_results
        && secs <= 600.0;
    Outcome::new(
        pass,
        format!(
            "hit rate {:.3} (predicted {:.3}); median {:.2} -> {:.4} ms = {:.1}x (need 3x); mean {:.1} -> {:.1} ms = {:.3}x vs expected {:.3}x, error {:+.1}% (limit 25%); identical {}; {secs:.0} s (limit 600)",
            r.hit_rate,
            r.predicted_hit_rate,
            r.median_uncached_ms,
            r.median_cached_ms,
            r.speedup,
            r.mean_uncached_ms,
            r.mean_cached_ms,
            r.mean_speedup,
            r.predicted_speedup,
            r.relative_error * 100.0,
            r.identical_results
        ),
    )
}

fn stateful_skip_equivalence() -> Outcome {
    let t = Instant::now();
    let r = stateful_equivalence(6);
    let secs = t.elapsed().as_secs_f64();
    let expected: usize = (1..=6).map(|k| 4usize.pow(k)).sum();
    let pass = r.trajectories == expected
        && r.mismatches == 0
        && r.stateful_hits >= r.strict_hits
        && r.reordered_strictly_better > 0
        && secs <= 180.0;
    Outcome::new(
        pass,
        format!(
            "{} trajectories ({expected} expected), {} calls, {} mismatches; hits strict {} vs stateful {}; reordered pairs {} ({} strictly better, {} worse); {secs:.1} s (limit 180)",
            r.trajectories, r.calls, r.mismatches, r.strict_hits, r.stateful_hits, r.reordered_pairs, r.reordered_strictly_better, r.reordered_worse
        ),
    )
}

fn latency() -> Outcome {
    let servers = start_local_shards(1).expect("shard starts");
    let http = Arc::new(HttpCache::new(vec![servers[0].url()], Duration::from_secs(10), 0));
    let corpus = load_corpus(http.as_ref(), 8192, 64);
    let cell = open_loop(http, &corpus, 100.0, Duration::from_secs(60), 32, 7);
    drop(servers);
    let pass = cell.errors == 0 && cell.p95_ms < 10.0 && !cell.saturated;
    Outcome {
        pass,
        detail: format!(
            "1 shard, {} keys, offered 100 RPS for 60 s: achieved {:.1} RPS, {} requests, {} errors, p50 {:.3} ms, p95 {:.3} ms, p99 {:.3} ms (need p95 < 10)",
            corpus.keys.len(),
            cell.achieved_rps,
            cell.requests,
            cell.errors,
            cell.p50_ms,
            cell.p95_ms,
            cell.p99_ms
        ),
        unmet: if pass { None } else { needs_cores(4) },
    }
}

fn sharding() -> Outcome {
    let cfg = SweepConfig {
        rps_levels: vec![100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0, 6400.0, 12800.0],
        shard_counts: vec![1, 4],
        corpus_keys: 8192,
        duration: Duration::from_secs(5),
        workers: 64,
        p95_budget_ms: 10.0,
        seed: 11,
    };
    let cells = latency_sweep(&cfg).expect("shards start");
    let one = max_sustained_rps(&cells, 1, cfg.p95_budget_ms);
    let four = max_sustained_rps(&cells, 4, cfg.p95_budget_ms);
    let levels: Vec<String> = cells
        .iter()
        .map(|c| format!("{}x{}:{:.0}/{:.2}ms{}", c.shards, c.offered_rps, c.achieved_rps, c.p95_ms, if c.within(10.0) { "" } else { "!" }))
        .collect();
    let pass = one > 0.0 && four >= 3.0 * one;
    Outcome {
        pass,
        detail: format!(
            "max sustained RPS within p95 < 10 ms: 1 shard {one}, 4 shards {four}, ratio {:.2} (need 3.0); cells [{}]",
            if one > 0.0 { four / one } else { 0.0 },
            levels.join(" ")
        ),
        unmet: if pass { None } else { needs_cores(4) },
    }
}

fn refcount_safety() -> Outcome {
    let r = refcount_schedule(10_000, 4, 1);
    let mut ops: Vec<String> = r.ops.iter().map(|(k, v)| format!("{k}={v}")).collect();
    ops.sort();
    Outcome::new(
        r.iterations == 10_000 && r.violations == 0 && r.drain_checks > 0 && r.evictions > 0,
        format!(
            "{} iterations [{}], {} evictions, {} drain checks, {} violations, {} snapshots at end (budget {}){}",
            r.iterations,
            ops.join(" "),
            r.evictions,
            r.drain_checks,
            r.violations,
            r.final_snapshots,
            r.budget,
            r.first_violation.map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    )
}

struct Served {
    child: Child,
    http: Arc<HttpCache>,
}

fn serve(dir: &Path, shards: usize) -> Served {
    let mut child = Command::new(env!("CARGO_BIN_EXE_tvcache"))
        .args(["serve", "--listen", "127.0.0.1:0", "--persist-interval-s", "1", "--lease-ttl-s", "5"])
        .args(["--shards", &shards.to_string(), "--persist-dir", dir.to_str().unwrap()])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .expect("server binary starts");
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let urls = (0..shards)
        .map(|_| lines.next().expect("listening line").unwrap().rsplit(' ').next().unwrap().to_string())
        .collect();
    Served { child, http: Arc::new(HttpCache::new(urls, Duration::from_secs(5), 0)) }
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let shards = 2;
    let completed: Arc<Mutex<Vec<Rollout>>> = Arc::default();
    let (mut kills, mut corrupt, mut mismatches, mut runs) = (0, 0u64, 0usize, 0usize);
    let mut restored = Vec::new();
    let mut seed = 0u64;
    let started = Instant::now();
    while started.elapsed() < Duration::from_secs(120) {
        let server = serve(dir.path(), shards);
        let stats: Vec<_> = (0..shards).map(|i| server.http.stats(i).expect("fresh server answers")).collect();
        corrupt += stats.iter().map(|s| s.persistence.corrupt).sum::<u64>();
        restored.push(stats.iter().map(|s| s.persistence.restored).sum::<u64>());

        let stop = Arc::new(AtomicBool::new(false));
        let runner = {
            let (stop, http, completed) = (stop.clone(), server.http.clone(), completed.clone());
            let first_seed = seed;
            std::thread::spawn(move || {
                let (mut seed, mut mismatches, mut runs) = (first_seed, 0, 0);
                while !stop.load(Ordering::SeqCst) {
                    let spec = WorkloadSpec { tasks: 4, rollouts_per_task: 8, trajectory_len: LenRange { min: 2, max: 12 }, seed, ..Default::default() };
                    seed += 1;
                    let w = generate(&spec);
                    runs += 1;
                    if run(&w, &RunOptions { cache: Some(http.clone()), ..Default::default() }).is_err() {
                        mismatches += 1;
                    }
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    if (0..http.endpoints().len()).all(|i| http.persist_now(i).is_ok_and(|r| r.failed == 0)) {
                        completed.lock().unwrap().extend(w.rollouts);
                    }
                }
                (seed, mismatches, runs)
            })
        };
        std::thread::sleep(Duration::from_secs(10));
        let mut child = server.child;
        child.kill().expect("SIGKILL");
        child.wait().unwrap();
        kills += 1;
        stop.store(true, Ordering::SeqCst);
        let (next, m, n) = runner.join().unwrap();
        seed = next;
        mismatches += m;
        runs += n;
    }

    let server = serve(dir.path(), shards);
    let http = server.http.clone();
    let stats: Vec<_> = (0..shards).map(|i| http.stats(i).expect("final server answers")).collect();
    corrupt += stats.iter().map(|s| s.persistence.corrupt).sum::<u64>();
    let oracle = FileTreeBackend::default();
    let completed = completed.lock().unwrap().clone();
    let (mut checked, mut missing) = (0usize, 0usize);
    let mut seen = HashSet::new();
    for r in &completed {
        let q = Trajectory::new(r.steps.clone());
        let fresh = fresh_execution(&oracle, &q);
        for (i, want) in fresh.iter().enumerate() {
            let prefix = q.prefix(i + 1);
            if !seen.insert((r.task, prefix.key_hash())) {
                continue;
            }
            checked += 1;
            match http.get(&task_id(r.task), &prefix, MatchMode::Strict) {
                Ok(Some(got)) if got.same_value(want) => {}
                _ => missing += 1,
            }
        }
    }
    let after = WorkloadSpec { tasks: 4, rollouts_per_task: 8, epochs: 2, trajectory_len: LenRange { min: 2, max: 12 }, seed: 9_999, ..Default::default() };
    let final_oracle = run(&generate(&after), &RunOptions { cache: Some(http.clone()), ..Default::default() });
    let final_ok = final_oracle.as_ref().is_ok_and(|r| r.report.hits > 0);
    let mut child = server.child;
    child.kill().unwrap();
    child.wait().unwrap();

    Outcome::new(
        kills >= 12 && corrupt == 0 && missing == 0 && checked > 0 && mismatches == 0 && final_ok,
        format!(
            "{kills} SIGKILLs over {:.0} s, {runs} workload runs, {} completed rollouts; graphs restored per start {:?}; {checked} persisted keys checked, {missing} missing or wrong; {mismatches} oracle mismatches during kills; final oracle run {}; {corrupt} corrupt graphs",
            started.elapsed().as_secs_f64(),
            completed.len(),
            restored,
            match &final_oracle {
                Ok(r) => format!("clean ({} hits of {})", r.report.hits, r.report.tool_calls),
                Err(e) => format!("failed: {e}"),
            }
        ),
    )
}

fn snapshot_policy() -> Outcome {
    let spec = WorkloadSpec {
        tasks: 2,
        rollouts_per_task: 4,
        epochs: 1,
        trajectory_len: LenRange { min: 4, max: 6 },
        branch_prob: 0.3,
        tool_cost: CostMix::bimodal(0.8, 5.0, 2000.0),
        seed: 2,
        ..Default::default()
    };
    let sandbox = FileTreeConfig { snapshot_ms: 50.0, restore_ms: 50.0, ..Default::default() };
    let r = snapshot_policy_audit(&spec, sandbox).expect("oracle gate");
    Outcome::new(
        r.violations == 0 && r.snapshots_taken > 0 && r.snapshots_taken < r.decisions,
        format!(
            "{} decisions, {} snapshots taken, {} nodes holding snapshots, {} violations{}",
            r.decisions,
            r.snapshots_taken,
            r.nodes_with_snapshots,
            r.violations,
            r.first_violation.map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    )
}

fn main() {
    let strict = std::env::var("TVC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("correctness_oracle", correctness_oracle),
        ("staleness_negative_control", staleness_control),
        ("hit_rate_arithmetic", hit_rate_arithmetic),
        ("speedup", speedup_reproduction),
        ("stateful_skip_equivalence", stateful_skip_equivalence),
        ("latency", latency),
        ("sharding", sharding),
        ("refcount_eviction_safety", refcount_safety),
        ("persistence", persistence),
        ("snapshot_policy", snapshot_policy),
    ];
    println!("acceptance: {} core(s)", cores());
    let mut failed = Vec::new();
    for (name, f) in criteria {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let note = o.unmet.as_ref().map(|u| format!(" [precondition not met: {u}]")).unwrap_or_default();
        println!("{verdict} {name}: {} ({:.1} s){note}", o.detail, t.elapsed().as_secs_f64());
        if !o.pass && (strict || o.unmet.is_none()) {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("acceptance failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
