//! Rollout-side lookup algorithm: exact get, then longest-prefix match with
//! fork and replay, then a clean root; results are inserted step by step and
//! snapshotted selectively.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheError, EvictedSnapshot, MatchMode, ToolCache};
use crate::forkpool::ForkPool;
use crate::sandbox::{Backend, SandboxHandle};
use crate::snapshot::{SnapshotPolicy, SnapshotRef, SnapshotStore};
use crate::tcg::{NodeId, ToolDescriptor, ToolResult, Trajectory};

/// How one call_tool invocation was served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "path", rename_all = "snake_case")]
pub enum Decision {
    /// Served from the cache.
    Hit,
    /// Executed in the session's own sandbox after an earlier miss.
    Diverged,
    /// Forked from a snapshot `snapshot_depth` steps into the tree key and
    /// replayed `replayed` steps before the requested one.
    Forked { matched_len: usize, snapshot_depth: usize, replayed: usize },
    /// Started from a clean root and executed `replayed` earlier steps.
    Root { matched_len: usize, replayed: usize },
    /// The cache failed; executed without it.
    Offline { replayed: usize },
}

impl Decision {
    pub fn is_hit(&self) -> bool {
        matches!(self, Decision::Hit)
    }
}

/// One snapshot policy evaluation, kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDecision {
    pub task_id: String,
    pub depth: usize,
    pub exec_ms: f64,
    pub overhead_ms: f64,
    pub snapshot: bool,
    /// Id of the stored snapshot, when one was stored.
    pub snapshot_id: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub hits: u64,
    pub misses: u64,
    /// Backend executions, including replays.
    pub executed_tools: u64,
    /// Executions of steps before the requested one.
    pub replayed_tools: u64,
    pub total_tool_ms: f64,
    /// Execution time of the hit results minus time spent in cache lookups.
    pub saved_ms_estimate: f64,
}

/// One rollout's view of the cache.
pub struct RolloutSession {
    task_id: String,
    mode: MatchMode,
    history: Trajectory,
    sandbox: Option<SandboxHandle>,
    offline: bool,
    /// Node whose snapshot equals the current sandbox state.
    state_snapshot: Option<(NodeId, SnapshotRef)>,
    decisions: Vec<Decision>,
    report: RolloutReport,
    hit_ms: f64,
    lookup_ms: f64,
}

impl RolloutSession {
    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn mode(&self) -> MatchMode {
        self.mode
    }

    pub fn history(&self) -> &Trajectory {
        &self.history
    }

    pub fn has_sandbox(&self) -> bool {
        self.sandbox.is_some()
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    /// Snapshot of the live sandbox, for comparing against oracles.
    pub fn sandbox_snapshot(&self, backend: &dyn Backend) -> Option<Vec<u8>> {
        self.sandbox.as_ref().and_then(|h| backend.snapshot(h).ok())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorStats {
    pub leases_acquired: u64,
    pub leases_released: u64,
    pub cache_errors: u64,
    pub snapshots_stored: u64,
    pub snapshots_discarded: u64,
}

/// Runs tool calls for any number of concurrent sessions against a shared
/// cache and fork pool.
pub struct Executor {
    cache: Arc<dyn ToolCache>,
    pool: Arc<ForkPool>,
    policy: SnapshotPolicy,
    audit: Option<Mutex<Vec<SnapshotDecision>>>,
    leases_acquired: AtomicU64,
    leases_released: AtomicU64,
    cache_errors: AtomicU64,
    snapshots_stored: AtomicU64,
    snapshots_discarded: AtomicU64,
}

impl Executor {
    pub fn new(cache: Arc<dyn ToolCache>, pool: Arc<ForkPool>, policy: SnapshotPolicy) -> Self {
        Self {
            cache,
            pool,
            policy,
            audit: None,
            leases_acquired: AtomicU64::new(0),
            leases_released: AtomicU64::new(0),
            cache_errors: AtomicU64::new(0),
            snapshots_stored: AtomicU64::new(0),
            snapshots_discarded: AtomicU64::new(0),
        }
    }

    /// Records every snapshot policy decision.
    pub fn with_audit(mut self) -> Self {
        self.audit = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn pool(&self) -> &Arc<ForkPool> {
        &self.pool
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        self.pool.backend()
    }

    pub fn store(&self) -> &Arc<SnapshotStore> {
        self.pool.store()
    }

    pub fn audit_log(&self) -> Vec<SnapshotDecision> {
        self.audit.as_ref().map(|a| a.lock().clone()).unwrap_or_default()
    }

    pub fn stats(&self) -> ExecutorStats {
        ExecutorStats {
            leases_acquired: self.leases_acquired.load(Ordering::Relaxed),
            leases_released: self.leases_released.load(Ordering::Relaxed),
            cache_errors: self.cache_errors.load(Ordering::Relaxed),
            snapshots_stored: self.snapshots_stored.load(Ordering::Relaxed),
            snapshots_discarded: self.snapshots_discarded.load(Ordering::Relaxed),
        }
    }

    pub fn start_rollout(&self, task_id: impl Into<String>, mode: MatchMode) -> RolloutSession {
        RolloutSession {
            task_id: task_id.into(),
            mode,
            history: Trajectory::empty(),
            sandbox: None,
            offline: false,
            state_snapshot: None,
            decisions: Vec::new(),
            report: RolloutReport::default(),
            hit_ms: 0.0,
            lookup_ms: 0.0,
        }
    }

    /// Result of calling `descriptor` after the session's history.
    pub fn call_tool(&self, session: &mut RolloutSession, descriptor: &ToolDescriptor) -> ToolResult {
        let q = session.history.with(descriptor.clone());
        let result = if session.sandbox.is_some() {
            session.report.misses += 1;
            session.decisions.push(Decision::Diverged);
            self.execute_step(session, &q)
        } else {
            self.lookup_or_execute(session, &q)
        };
        session.history = q;
        result
    }

    fn lookup_or_execute(&self, session: &mut RolloutSession, q: &Trajectory) -> ToolResult {
        let t = Instant::now();
        let got = self.cache.get(&session.task_id, q, session.mode);
        session.lookup_ms += t.elapsed().as_secs_f64() * 1000.0;
        match got {
            Ok(Some(r)) => {
                session.report.hits += 1;
                session.hit_ms += r.exec_ms;
                session.decisions.push(Decision::Hit);
                return r;
            }
            Ok(None) => {}
            Err(e) => return self.go_offline(session, q, e),
        }
        session.report.misses += 1;

        let t = Instant::now();
        let m = self.cache.prefix_match(&session.task_id, q, session.mode);
        session.lookup_ms += t.elapsed().as_secs_f64() * 1000.0;
        let m = match m {
            Ok(m) => m,
            Err(e) => {
                session.report.misses -= 1;
                return self.go_offline(session, q, e);
            }
        };
        let key = session.mode.tree_key(q);
        if m.lease_id.is_some() {
            self.leases_acquired.fetch_add(1, Ordering::Relaxed);
        }

        let forked = match (&m.snapshot_node_id, &m.snapshot, m.snapshot_depth) {
            (Some(node), Some(snap), Some(depth)) => {
                let acquired = self.pool.acquire_for_node(&session.task_id, *node, snap);
                if let Err(e) = &acquired {
                    tracing::warn!(task = %session.task_id, error = %e, "fork from snapshot failed, starting from root");
                }
                acquired.ok().map(|h| (h, depth, *node, snap.clone()))
            }
            _ => None,
        };
        // The fork is done (or abandoned); the snapshot need not stay pinned.
        if let Some(lease) = &m.lease_id {
            self.leases_released.fetch_add(1, Ordering::Relaxed);
            match self.cache.release(&session.task_id, lease) {
                Ok(evicted) => self.drop_evicted(&session.task_id, &evicted),
                Err(e) => {
                    self.cache_errors.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(task = %session.task_id, error = %e, "lease release failed");
                }
            }
        }

        let (handle, start) = match forked {
            Some((h, depth, node, snap)) => {
                session.decisions.push(Decision::Forked {
                    matched_len: m.matched_len,
                    snapshot_depth: depth,
                    replayed: key.len() - depth - 1,
                });
                session.state_snapshot = Some((node, snap));
                (h, depth)
            }
            None => match self.pool.acquire_root() {
                Ok(h) => {
                    session.decisions.push(Decision::Root { matched_len: m.matched_len, replayed: key.len() - 1 });
                    (h, 0)
                }
                Err(e) => {
                    session.decisions.push(Decision::Root { matched_len: m.matched_len, replayed: 0 });
                    return ToolResult::tool_error(format!("sandbox unavailable: {e}"), 0.0);
                }
            },
        };
        session.sandbox = Some(handle);
        self.replay(session, &key, start)
    }

    /// Executes `key[start..]` in the session sandbox, inserting each step.
    fn replay(&self, session: &mut RolloutSession, key: &Trajectory, start: usize) -> ToolResult {
        for i in start..key.len() - 1 {
            session.report.replayed_tools += 1;
            let r = self.execute_step(session, &key.prefix(i + 1));
            if is_infra_failure(&r) {
                return r;
            }
        }
        self.execute_step(session, key)
    }

    fn go_offline(&self, session: &mut RolloutSession, q: &Trajectory, e: CacheError) -> ToolResult {
        self.cache_errors.fetch_add(1, Ordering::Relaxed);
        tracing::warn!(task = %session.task_id, error = %e, "cache unavailable, executing without it");
        session.offline = true;
        session.report.misses += 1;
        session.decisions.push(Decision::Offline { replayed: q.len() - 1 });
        match self.pool.acquire_root() {
            Ok(h) => session.sandbox = Some(h),
            Err(e) => return ToolResult::tool_error(format!("sandbox unavailable: {e}"), 0.0),
        }
        for i in 0..q.len() - 1 {
            session.report.replayed_tools += 1;
            let r = self.execute_step(session, &q.prefix(i + 1));
            if is_infra_failure(&r) {
                return r;
            }
        }
        self.execute_step(session, q)
    }

    /// Executes the last step of `q` in the session sandbox, then inserts
    /// the result and applies the snapshot policy.
    fn execute_step(&self, session: &mut RolloutSession, q: &Trajectory) -> ToolResult {
        let backend = self.pool.backend();
        let step = q.last().expect("non-empty trajectory");
        let handle = session.sandbox.as_mut().expect("executing requires a sandbox");
        let result = match backend.execute(handle, step) {
            Ok(r) => r,
            Err(e) => return ToolResult::tool_error(format!("{SANDBOX_FAILURE}{e}"), 0.0),
        };
        session.report.executed_tools += 1;
        session.report.total_tool_ms += result.exec_ms;
        if step.mutates_state() {
            session.state_snapshot = None;
        }
        if session.offline {
            return result;
        }

        let snapshot = self.maybe_snapshot(session, q.len(), result.exec_ms);
        match self.cache.put(&session.task_id, q, &result, snapshot.as_ref(), session.mode) {
            Ok(outcome) => {
                if let Some(snap) = snapshot {
                    if outcome.snapshot_adopted {
                        self.pool.background_instantiate(&session.task_id, outcome.node_id, &snap);
                        session.state_snapshot = Some((outcome.node_id, snap));
                    } else {
                        self.discard_bytes(&snap);
                    }
                }
                self.drop_evicted(&session.task_id, &outcome.evicted);
            }
            Err(e) => {
                if let Some(snap) = snapshot {
                    self.discard_bytes(&snap);
                }
                self.cache_errors.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(task = %session.task_id, error = %e, "insert failed");
                if matches!(e, CacheError::Unavailable(_)) {
                    session.offline = true;
                }
            }
        }
        result
    }

    fn maybe_snapshot(&self, session: &RolloutSession, depth: usize, exec_ms: f64) -> Option<SnapshotRef> {
        let backend = self.pool.backend();
        let store = self.pool.store();
        let estimate = store.cost_model().estimate(backend.kind());
        let decided = self.policy.decide(exec_ms, &estimate);
        let stored = if decided {
            let handle = session.sandbox.as_ref().expect("sandbox present");
            let t = Instant::now();
            let stored = backend
                .snapshot(handle)
                .map_err(|e| e.to_string())
                .and_then(|bytes| {
                    let ms = t.elapsed().as_secs_f64() * 1000.0;
                    store.store(&bytes, backend.kind(), ms).map_err(|e| e.to_string())
                });
            match stored {
                Ok(r) => {
                    self.snapshots_stored.fetch_add(1, Ordering::Relaxed);
                    Some(r)
                }
                Err(e) => {
                    tracing::warn!(task = %session.task_id, error = %e, "snapshot not stored");
                    None
                }
            }
        } else {
            None
        };
        if let Some(audit) = &self.audit {
            audit.lock().push(SnapshotDecision {
                task_id: session.task_id.clone(),
                depth,
                exec_ms,
                overhead_ms: estimate.overhead_ms(),
                snapshot: decided,
                snapshot_id: stored.as_ref().map(|s| s.snapshot_id.clone()),
            });
        }
        stored
    }

    fn discard_bytes(&self, snap: &SnapshotRef) {
        self.snapshots_discarded.fetch_add(1, Ordering::Relaxed);
        let _ = self.pool.store().drop_ref(snap);
    }

    fn drop_evicted(&self, task_id: &str, evicted: &[EvictedSnapshot]) {
        for e in evicted {
            self.pool.discard(task_id, e.node_id, &e.snapshot.snapshot_id);
            let _ = self.pool.store().drop_ref(&e.snapshot);
        }
    }

    /// Tears the session down. A sandbox whose state is stored as a snapshot
    /// is offered to the pool as that node's prewarmed copy.
    pub fn end_rollout(&self, mut session: RolloutSession) -> RolloutReport {
        if let Some(mut h) = session.sandbox.take() {
            match session.state_snapshot.take() {
                Some((node, snap)) if h.is_alive() && !session.offline => {
                    self.pool.offer_prewarmed(&session.task_id, node, &snap, h)
                }
                _ => self.pool.backend().stop(&mut h),
            }
        }
        let mut report = session.report;
        report.saved_ms_estimate = session.hit_ms - session.lookup_ms;
        report
    }
}

const SANDBOX_FAILURE: &str = "sandbox failure: ";

fn is_infra_failure(r: &ToolResult) -> bool {
    !r.is_ok() && r.payload.starts_with(SANDBOX_FAILURE.as_bytes())
}

/// Executes `q` from scratch in a fresh sandbox and returns every step's
/// result. The reference every cached answer is compared against.
pub fn fresh_execution(backend: &dyn Backend, q: &Trajectory) -> Vec<ToolResult> {
    let mut h = match backend.start() {
        Ok(h) => h,
        Err(e) => return vec![ToolResult::tool_error(format!("{SANDBOX_FAILURE}{e}"), 0.0); q.len()],
    };
    let out = q
        .steps()
        .iter()
        .map(|d| backend.execute(&mut h, d).unwrap_or_else(|e| ToolResult::tool_error(format!("{SANDBOX_FAILURE}{e}"), 0.0)))
        .collect();
    backend.stop(&mut h);
    out
}

/// A cache keyed by the tool call alone, ignoring history. Kept as the
/// control that returns stale values when state changes between calls.
#[derive(Default)]
pub struct StatelessControlCache {
    map: Mutex<HashMap<String, ToolResult>>,
}

impl StatelessControlCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cached result for `descriptor` if any, else executes it in `handle`.
    pub fn call(&self, backend: &dyn Backend, handle: &mut SandboxHandle, descriptor: &ToolDescriptor) -> ToolResult {
        if let Some(r) = self.map.lock().get(&descriptor.key()) {
            return r.clone();
        }
        let r = backend
            .execute(handle, descriptor)
            .unwrap_or_else(|e| ToolResult::tool_error(format!("{SANDBOX_FAILURE}{e}"), 0.0));
        self.map.lock().insert(descriptor.key(), r.clone());
        r
    }
}
