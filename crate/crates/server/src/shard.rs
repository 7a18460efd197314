//! One shard: a cache, its HTTP routes, lease expiry and periodic
//! persistence.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use tvcache_core::cache::{Cache, CacheConfig, CacheError, CacheStats, EvictedSnapshot, MatchMode, ToolCache};
use tvcache_core::forkpool::PoolStats;
use tvcache_core::tcg::{fnv1a64, persist, restore_from_file, Trajectory};

use crate::config::ServerConfig;
use crate::wire::{
    self, ErrorBody, GetResponse, LookupRequest, PersistReport, PoolReport, PrefixMatchResponse, PutRequest,
    PutResponse, ReleaseRequest, ReleaseResponse, KEY_HEADER,
};

const GRAPH_EXT: &str = "tvc";

#[derive(Debug, Default)]
struct PersistCounters {
    cycles: AtomicU64,
    written: AtomicU64,
    failures: AtomicU64,
    restored: AtomicU64,
    corrupt: AtomicU64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersistStats {
    pub cycles: u64,
    pub written: u64,
    pub failures: u64,
    pub restored: u64,
    pub corrupt: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShardStats {
    pub shard: usize,
    pub shard_count: usize,
    #[serde(flatten)]
    pub cache: CacheStats,
    /// Sum over the pool reports clients have posted.
    pub pool: PoolStats,
    pub persistence: PersistStats,
    pub inflight: usize,
    pub rejected: u64,
}

/// State shared by a shard's handlers and background loop.
pub struct ShardState {
    index: usize,
    shard_count: usize,
    cache: Cache,
    blobs: Mutex<HashMap<(String, String), Vec<u8>>>,
    pending_evictions: Mutex<HashMap<String, Vec<EvictedSnapshot>>>,
    pool_reports: Mutex<HashMap<String, PoolStats>>,
    persist_dir: Option<PathBuf>,
    persist_lock: Mutex<()>,
    counters: PersistCounters,
    inflight: AtomicUsize,
    max_inflight: usize,
    rejected: AtomicU64,
    request_log: Option<Mutex<Box<dyn Write + Send>>>,
}

impl ShardState {
    pub fn new(config: &ServerConfig, index: usize) -> std::io::Result<Self> {
        let request_log: Option<Mutex<Box<dyn Write + Send>>> = match config.request_log.as_deref() {
            None => None,
            Some("-") => Some(Mutex::new(Box::new(std::io::stderr()))),
            Some(path) => Some(Mutex::new(Box::new(fs::OpenOptions::new().create(true).append(true).open(path)?))),
        };
        if let Some(dir) = &config.persist_dir {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            index,
            shard_count: config.shard_count,
            cache: Cache::new(CacheConfig { snapshot_budget: config.default_snapshot_budget, lease_ttl: config.lease_ttl() }),
            blobs: Mutex::new(HashMap::new()),
            pending_evictions: Mutex::new(HashMap::new()),
            pool_reports: Mutex::new(HashMap::new()),
            persist_dir: config.persist_dir.clone(),
            persist_lock: Mutex::new(()),
            counters: PersistCounters::default(),
            inflight: AtomicUsize::new(0),
            max_inflight: config.max_inflight,
            rejected: AtomicU64::new(0),
            request_log,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    /// Loads every persisted graph routed to this shard. Unreadable files
    /// are counted and left in place.
    pub fn restore_all(&self) -> usize {
        let Some(dir) = &self.persist_dir else { return 0 };
        let Ok(entries) = fs::read_dir(dir) else { return 0 };
        let mut loaded = 0;
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some(GRAPH_EXT) {
                continue;
            }
            let Some(task) = task_from_path(&path) else { continue };
            if wire::shard_for(&task, self.shard_count) != self.index {
                continue;
            }
            match restore_from_file(&path) {
                Ok(g) if g.task_id() == task => {
                    self.cache.install(g);
                    loaded += 1;
                }
                Ok(g) => {
                    self.counters.corrupt.fetch_add(1, Ordering::Relaxed);
                    tracing::error!(path = %path.display(), task = g.task_id(), "graph file names a different task");
                }
                Err(e) => {
                    self.counters.corrupt.fetch_add(1, Ordering::Relaxed);
                    tracing::error!(path = %path.display(), error = %e, "skipping unreadable graph file");
                }
            }
        }
        self.counters.restored.fetch_add(loaded as u64, Ordering::Relaxed);
        loaded
    }

    /// Writes every graph changed since its last write.
    pub fn persist_dirty(&self) -> PersistReport {
        let Some(dir) = &self.persist_dir else { return PersistReport::default() };
        let _guard = self.persist_lock.lock();
        self.counters.cycles.fetch_add(1, Ordering::Relaxed);
        let mut report = PersistReport::default();
        for (task, graph, _) in self.cache.dirty_tasks() {
            let mut bytes = Vec::new();
            let generation = {
                let g = graph.read();
                if let Err(e) = persist(&g, &mut bytes) {
                    tracing::error!(task = %task, error = %e, "serializing graph failed");
                    report.failed += 1;
                    continue;
                }
                g.generation()
            };
            match atomic_write(&graph_path(dir, &task), &bytes) {
                Ok(()) => {
                    self.cache.mark_persisted(&task, generation);
                    report.written += 1;
                }
                Err(e) => {
                    tracing::error!(task = %task, error = %e, "writing graph failed");
                    report.failed += 1;
                }
            }
        }
        self.counters.written.fetch_add(report.written as u64, Ordering::Relaxed);
        self.counters.failures.fetch_add(report.failed as u64, Ordering::Relaxed);
        report
    }

    /// Expires overdue leases; evictions they cause are reported on the
    /// task's next put or release.
    pub fn expire_leases(&self) {
        let expired = self.cache.expire_leases();
        if expired.is_empty() {
            return;
        }
        let mut pending = self.pending_evictions.lock();
        for (task, evicted) in expired {
            pending.entry(task).or_default().extend(evicted);
        }
    }

    fn take_pending(&self, task: &str, mut evicted: Vec<EvictedSnapshot>) -> Vec<EvictedSnapshot> {
        if let Some(p) = self.pending_evictions.lock().remove(task) {
            evicted.extend(p);
        }
        evicted
    }

    pub fn stats(&self) -> ShardStats {
        let mut pool = PoolStats::default();
        for s in self.pool_reports.lock().values() {
            pool.warm_root_count += s.warm_root_count;
            pool.prewarmed_count += s.prewarmed_count;
            pool.in_flight_forks += s.in_flight_forks;
            pool.max_in_flight_forks = pool.max_in_flight_forks.max(s.max_in_flight_forks);
            pool.proactive_hits += s.proactive_hits;
            pool.reactive_forks += s.reactive_forks;
            pool.background_instantiations += s.background_instantiations;
            pool.warm_root_hits += s.warm_root_hits;
            pool.cold_root_starts += s.cold_root_starts;
            pool.failed_jobs += s.failed_jobs;
            pool.discarded_prewarms += s.discarded_prewarms;
        }
        let c = &self.counters;
        ShardStats {
            shard: self.index,
            shard_count: self.shard_count,
            cache: self.cache.stats(),
            pool,
            persistence: PersistStats {
                cycles: c.cycles.load(Ordering::Relaxed),
                written: c.written.load(Ordering::Relaxed),
                failures: c.failures.load(Ordering::Relaxed),
                restored: c.restored.load(Ordering::Relaxed),
                corrupt: c.corrupt.load(Ordering::Relaxed),
            },
            inflight: self.inflight.load(Ordering::Relaxed),
            rejected: self.rejected.load(Ordering::Relaxed),
        }
    }

    fn log(&self, endpoint: &str, task: Option<&str>, started: Instant, status: StatusCode) {
        let Some(out) = &self.request_log else { return };
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let line = json!({
            "ts": ts,
            "shard": self.index,
            "endpoint": endpoint,
            "task_id_hash": task.map(|t| format!("{:016x}", fnv1a64(t.as_bytes()))),
            "latency_us": started.elapsed().as_micros() as u64,
            "outcome": status.as_u16(),
        });
        let mut out = out.lock();
        let _ = writeln!(out, "{line}");
    }
}

fn graph_path(dir: &Path, task: &str) -> PathBuf {
    dir.join(format!("task-{}.{GRAPH_EXT}", hex::encode(task.as_bytes())))
}

fn task_from_path(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?.strip_prefix("task-")?;
    String::from_utf8(hex::decode(stem).ok()?).ok()
}

/// Writes through a temporary file, fsyncs, then renames over `path`, so a
/// crash leaves either the old or the new contents.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

type Shared = Arc<ShardState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/put", post(put).put(put))
        .route("/get", post(get_post).get(get_alias))
        .route("/prefix_match", post(prefix_match))
        .route("/release", post(release))
        .route("/stats", get(stats))
        .route("/graph", get(graph))
        .route("/task_blob", get(blob_get).put(blob_put))
        .route("/pool_stats", post(pool_stats))
        .route("/persist_now", post(persist_now))
        .route("/health", get(|| async { "ok" }))
        .layer(middleware::from_fn_with_state(state.clone(), admission))
        .with_state(state)
}

/// Sheds load with 503 once `max_inflight` requests are being served.
async fn admission(State(s): State<Shared>, req: Request, next: Next) -> Response {
    let n = s.inflight.fetch_add(1, Ordering::SeqCst);
    let resp = if n >= s.max_inflight {
        s.rejected.fetch_add(1, Ordering::Relaxed);
        error(StatusCode::SERVICE_UNAVAILABLE, "overloaded", "shard overloaded".into())
    } else {
        next.run(req).await
    };
    s.inflight.fetch_sub(1, Ordering::SeqCst);
    resp
}

fn error(status: StatusCode, kind: &str, message: String) -> Response {
    (status, Json(ErrorBody { error: message, kind: kind.to_string() })).into_response()
}

fn cache_error(e: CacheError) -> Response {
    match e {
        CacheError::MissingPrefix { .. } => error(StatusCode::CONFLICT, "missing_prefix", e.to_string()),
        CacheError::UnknownLease(_) => error(StatusCode::NOT_FOUND, "unknown_lease", e.to_string()),
        CacheError::LeaseExpired(_) => error(StatusCode::GONE, "lease_expired", e.to_string()),
        CacheError::Invalid(_) => error(StatusCode::BAD_REQUEST, "invalid", e.to_string()),
        CacheError::Unavailable(_) => error(StatusCode::SERVICE_UNAVAILABLE, "unavailable", e.to_string()),
    }
}

/// Parses a JSON body, answering 400 on failure.
fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, "malformed", e.to_string()))
}

fn finish(s: &ShardState, endpoint: &str, task: Option<&str>, started: Instant, resp: Response) -> Response {
    s.log(endpoint, task, started, resp.status());
    resp
}

async fn put(State(s): State<Shared>, body: Bytes) -> Response {
    let started = Instant::now();
    let req: PutRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return finish(&s, "put", None, started, resp),
    };
    let q = wire::trajectory(&req.trajectory);
    let snapshot = req.snapshot_ref();
    let resp = match s.cache.put(&req.task_id, &q, &req.result, snapshot.as_ref(), req.mode) {
        Ok(o) => Json(PutResponse {
            node_id: o.node_id,
            created: o.created,
            snapshot_adopted: o.snapshot_adopted,
            evicted: s.take_pending(&req.task_id, o.evicted),
        })
        .into_response(),
        Err(e) => cache_error(e),
    };
    finish(&s, "put", Some(&req.task_id), started, resp)
}

fn lookup(s: &ShardState, task: &str, q: &Trajectory, mode: MatchMode) -> Response {
    match s.cache.get(task, q, mode) {
        Ok(result) => Json(GetResponse { hit: result.is_some(), result }).into_response(),
        Err(e) => cache_error(e),
    }
}

async fn get_post(State(s): State<Shared>, body: Bytes) -> Response {
    let started = Instant::now();
    let req: LookupRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return finish(&s, "get", None, started, resp),
    };
    let resp = lookup(&s, &req.task_id, &wire::trajectory(&req.trajectory), req.mode);
    finish(&s, "get", Some(&req.task_id), started, resp)
}

#[derive(Deserialize)]
struct GetAliasQuery {
    task_id: String,
    /// Hex FNV-1a hash of the encoded key, checked against the header.
    key_hash: String,
    #[serde(default)]
    mode: MatchMode,
}

async fn get_alias(State(s): State<Shared>, Query(p): Query<GetAliasQuery>, headers: HeaderMap) -> Response {
    let started = Instant::now();
    let decoded = headers
        .get(KEY_HEADER)
        .ok_or("missing key header".to_string())
        .and_then(|v| B64.decode(v.as_bytes()).map_err(|e| e.to_string()))
        .and_then(|b| String::from_utf8(b).map_err(|e| e.to_string()))
        .and_then(|k| Trajectory::decode(&k).map_err(|e| e.to_string()));
    let resp = match decoded {
        Err(e) => error(StatusCode::BAD_REQUEST, "malformed", e),
        Ok(q) if format!("{:016x}", q.key_hash()) != p.key_hash.to_ascii_lowercase() => {
            error(StatusCode::BAD_REQUEST, "hash_mismatch", "key_hash does not match key".into())
        }
        Ok(q) => lookup(&s, &p.task_id, &q, p.mode),
    };
    finish(&s, "get", Some(&p.task_id), started, resp)
}

async fn prefix_match(State(s): State<Shared>, body: Bytes) -> Response {
    let started = Instant::now();
    let req: LookupRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return finish(&s, "prefix_match", None, started, resp),
    };
    let resp = match s.cache.prefix_match(&req.task_id, &wire::trajectory(&req.trajectory), req.mode) {
        Ok(m) => Json(PrefixMatchResponse::from(m)).into_response(),
        Err(e) => cache_error(e),
    };
    finish(&s, "prefix_match", Some(&req.task_id), started, resp)
}

async fn release(State(s): State<Shared>, body: Bytes) -> Response {
    let started = Instant::now();
    let req: ReleaseRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return finish(&s, "release", None, started, resp),
    };
    let resp = match s.cache.release(&req.task_id, &req.lease_id) {
        Ok(evicted) => {
            Json(ReleaseResponse { released: true, evicted: s.take_pending(&req.task_id, evicted) }).into_response()
        }
        Err(e) => cache_error(e),
    };
    finish(&s, "release", Some(&req.task_id), started, resp)
}

async fn stats(State(s): State<Shared>) -> Response {
    let started = Instant::now();
    let resp = Json(s.stats()).into_response();
    finish(&s, "stats", None, started, resp)
}

#[derive(Deserialize)]
struct TaskQuery {
    task_id: String,
}

async fn graph(State(s): State<Shared>, Query(p): Query<TaskQuery>) -> Response {
    let started = Instant::now();
    let resp = match s.cache.export_dot(&p.task_id) {
        Some(dot) => ([("content-type", "text/vnd.graphviz")], dot).into_response(),
        None => error(StatusCode::NOT_FOUND, "unknown_task", format!("no graph for task {:?}", p.task_id)),
    };
    finish(&s, "graph", Some(&p.task_id), started, resp)
}

#[derive(Deserialize)]
struct BlobQuery {
    task_id: String,
    #[serde(default)]
    key: String,
}

async fn blob_put(State(s): State<Shared>, Query(p): Query<BlobQuery>, body: Bytes) -> Response {
    let started = Instant::now();
    s.blobs.lock().insert((p.task_id.clone(), p.key), body.to_vec());
    let resp = Json(json!({"stored": body.len()})).into_response();
    finish(&s, "task_blob", Some(&p.task_id), started, resp)
}

async fn blob_get(State(s): State<Shared>, Query(p): Query<BlobQuery>) -> Response {
    let started = Instant::now();
    let blob = s.blobs.lock().get(&(p.task_id.clone(), p.key)).cloned();
    let resp = match blob {
        Some(b) => b.into_response(),
        None => error(StatusCode::NOT_FOUND, "unknown_blob", "no such blob".into()),
    };
    finish(&s, "task_blob", Some(&p.task_id), started, resp)
}

async fn pool_stats(State(s): State<Shared>, body: Bytes) -> Response {
    let started = Instant::now();
    let resp = match parse::<PoolReport>(&body) {
        Ok(r) => {
            s.pool_reports.lock().insert(r.client_id, r.stats);
            StatusCode::NO_CONTENT.into_response()
        }
        Err(resp) => resp,
    };
    finish(&s, "pool_stats", None, started, resp)
}

async fn persist_now(State(s): State<Shared>) -> Response {
    let started = Instant::now();
    let st = s.clone();
    let resp = match tokio::task::spawn_blocking(move || st.persist_dirty()).await {
        Ok(report) => Json(report).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    };
    finish(&s, "persist_now", None, started, resp)
}
