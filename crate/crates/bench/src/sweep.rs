//! Open-loop latency measurement of `/get` against running shards.
//!
//! A dispatcher releases requests on a fixed schedule regardless of how
//! fast earlier ones complete; worker threads issue them. Latency runs from
//! the scheduled instant to completion, so queueing delay is included.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use tvcache_core::cache::{MatchMode, ToolCache};
use tvcache_core::tcg::{ToolDescriptor, ToolResult, Trajectory};
use tvcache_server::{HttpCache, ServerConfig, ShardServer};

use crate::percentile;

/// Offered load is considered sustained when at least this fraction of it
/// completes.
pub const SATURATION_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub shards: usize,
    pub offered_rps: f64,
    pub achieved_rps: f64,
    pub requests: u64,
    pub errors: u64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub saturated: bool,
}

impl SweepCell {
    /// Sustained, error free and within the P95 budget.
    pub fn within(&self, p95_budget_ms: f64) -> bool {
        !self.saturated && self.errors == 0 && self.p95_ms < p95_budget_ms
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub rps_levels: Vec<f64>,
    pub shard_counts: Vec<usize>,
    pub corpus_keys: usize,
    pub duration: Duration,
    pub workers: usize,
    /// Stop raising the rate for a shard count once a level misses this.
    pub p95_budget_ms: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rps_levels: vec![1.0, 64.0, 256.0],
            shard_counts: vec![1],
            corpus_keys: 8192,
            duration: Duration::from_secs(10),
            workers: 32,
            p95_budget_ms: 10.0,
            seed: 0,
        }
    }
}

/// Keys preloaded into the cache: `tasks` spines whose every prefix is a key.
pub struct Corpus {
    pub keys: Vec<(String, Trajectory)>,
}

pub fn load_corpus(cache: &dyn ToolCache, keys: usize, tasks: usize) -> Corpus {
    let tasks = tasks.clamp(1, keys.max(1));
    let mut out = Vec::with_capacity(keys);
    for t in 0..tasks {
        let task = format!("corpus-{t}");
        let len = keys / tasks + usize::from(t < keys % tasks);
        let mut q = Trajectory::empty();
        for i in 0..len {
            q.push(ToolDescriptor::new("read", format!("{{\"path\":\"f{i}\"}}"), false).expect("valid descriptor"));
            cache
                .put(&task, &q, &ToolResult::ok(format!("value {t}/{i}"), 1.0), None, MatchMode::Strict)
                .expect("corpus loads");
            out.push((task.clone(), q.clone()));
        }
    }
    Corpus { keys: out }
}

/// Drives `rps` lookups per second for `duration` and summarizes latency.
/// A lookup that fails or misses counts as an error.
pub fn open_loop(cache: Arc<HttpCache>, corpus: &Corpus, rps: f64, duration: Duration, workers: usize, seed: u64) -> SweepCell {
    let total = ((rps * duration.as_secs_f64()).round() as u64).max(1);
    let (tx, rx) = crossbeam_channel::unbounded::<(Instant, usize)>();
    let start = Instant::now() + Duration::from_millis(20);
    let keys = &corpus.keys;
    let results: Vec<(Vec<f64>, u64, Instant)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers.max(1))
            .map(|_| {
                let rx = rx.clone();
                let cache = cache.clone();
                s.spawn(move || {
                    let (mut lat, mut errors, mut last) = (Vec::new(), 0u64, start);
                    for (at, k) in rx {
                        let (task, q) = &keys[k];
                        let ok = matches!(cache.get(task, q, MatchMode::Strict), Ok(Some(_)));
                        last = Instant::now();
                        lat.push(last.saturating_duration_since(at).as_secs_f64() * 1000.0);
                        errors += u64::from(!ok);
                    }
                    (lat, errors, last)
                })
            })
            .collect();
        drop(rx);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..total {
            let at = start + Duration::from_secs_f64(i as f64 / rps);
            let now = Instant::now();
            if at > now {
                std::thread::sleep(at - now);
            }
            tx.send((at, rng.gen_range(0..keys.len()))).expect("workers alive");
        }
        drop(tx);
        handles.into_iter().map(|h| h.join().expect("worker")).collect()
    });
    let mut lat = Vec::with_capacity(total as usize);
    let mut errors = 0;
    let mut last = start;
    for (l, e, t) in results {
        lat.extend(l);
        errors += e;
        last = last.max(t);
    }
    // The schedule spans (total - 1) / rps; one interval is added so a
    // perfectly kept schedule reports exactly the offered rate.
    let span = last.saturating_duration_since(start).as_secs_f64().max((total - 1) as f64 / rps) + 1.0 / rps;
    let achieved = total as f64 / span;
    SweepCell {
        shards: cache.endpoints().len(),
        offered_rps: rps,
        achieved_rps: achieved,
        requests: total,
        errors,
        p50_ms: percentile(&lat, 0.5),
        p95_ms: percentile(&lat, 0.95),
        p99_ms: percentile(&lat, 0.99),
        saturated: achieved < SATURATION_FRACTION * rps,
    }
}

/// Starts `shards` in-process shard servers on ephemeral ports.
pub fn start_local_shards(shards: usize) -> std::io::Result<Vec<ShardServer>> {
    let config = ServerConfig { listen: "127.0.0.1:0".parse().expect("addr"), shard_count: shards, ..Default::default() };
    (0..shards).map(|i| ShardServer::start(&config, i)).collect()
}

/// For every shard count, starts fresh local shards, loads the corpus and
/// measures each rate in ascending order. Higher rates are skipped once a
/// level misses the budget.
pub fn latency_sweep(cfg: &SweepConfig) -> std::io::Result<Vec<SweepCell>> {
    let mut rps = cfg.rps_levels.clone();
    rps.sort_by(f64::total_cmp);
    let mut cells = Vec::new();
    for &shards in &cfg.shard_counts {
        let servers = start_local_shards(shards)?;
        let http = Arc::new(HttpCache::new(servers.iter().map(ShardServer::url).collect(), Duration::from_secs(10), 0));
        let corpus = load_corpus(http.as_ref(), cfg.corpus_keys, 64);
        cells.extend(sweep_endpoints(http, &corpus, &rps, cfg));
    }
    Ok(cells)
}

/// Measures `rps` levels against already running shards.
pub fn sweep_endpoints(http: Arc<HttpCache>, corpus: &Corpus, rps: &[f64], cfg: &SweepConfig) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &r in rps {
        let cell = open_loop(http.clone(), corpus, r, cfg.duration, cfg.workers, cfg.seed);
        tracing::info!(shards = cell.shards, rps = r, achieved = cell.achieved_rps, p95 = cell.p95_ms, "sweep level");
        let stop = !cell.within(cfg.p95_budget_ms);
        cells.push(cell);
        if stop {
            break;
        }
    }
    cells
}

/// Highest offered rate for `shards` that stayed within budget.
pub fn max_sustained_rps(cells: &[SweepCell], shards: usize, p95_budget_ms: f64) -> f64 {
    cells.iter().filter(|c| c.shards == shards && c.within(p95_budget_ms)).map(|c| c.offered_rps).fold(0.0, f64::max)
}
