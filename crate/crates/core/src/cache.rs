//! Multi-task cache facade over per-task graphs, shared by the in-process
//! executor and the HTTP server.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::snapshot::SnapshotRef;
use crate::tcg::{
    export_dot, LeaseId, NodeId, PrefixMatch, StatsSnapshot, TaskGraph, TcgError, ToolResult, Trajectory,
    DEFAULT_LEASE_TTL,
};

/// Which lookup semantics a request uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Full-trajectory keys.
    #[default]
    Strict,
    /// Keys over mutating steps only; stateless results attach to the last
    /// mutating step.
    StatefulSkip,
}

impl MatchMode {
    /// The trajectory actually stored in the tree for query `q`: unchanged in
    /// strict mode, otherwise the mutating steps of the history plus the
    /// final step.
    pub fn tree_key(self, q: &Trajectory) -> Trajectory {
        match self {
            MatchMode::Strict => q.clone(),
            MatchMode::StatefulSkip => match q.steps().split_last() {
                None => Trajectory::empty(),
                Some((last, history)) => {
                    let mut key: Trajectory = history.iter().filter(|s| s.mutates_state()).cloned().collect();
                    key.push(last.clone());
                    key
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CacheError {
    #[error("cache unavailable: {0}")]
    Unavailable(String),
    #[error("missing prefix: matched {matched} of {expected} steps")]
    MissingPrefix { matched: usize, expected: usize },
    #[error("unknown lease {0}")]
    UnknownLease(String),
    #[error("lease {0} expired")]
    LeaseExpired(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

impl From<TcgError> for CacheError {
    fn from(e: TcgError) -> Self {
        match e {
            TcgError::MissingPrefix { matched, expected } => CacheError::MissingPrefix { matched, expected },
            TcgError::UnknownLease(l) => CacheError::UnknownLease(l.0),
            TcgError::LeaseExpired(l) => CacheError::LeaseExpired(l.0),
            other => CacheError::Invalid(other.to_string()),
        }
    }
}

/// Outcome of a put.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PutOutcome {
    pub node_id: NodeId,
    pub created: bool,
    /// False when a snapshot was supplied but the node already had one; the
    /// caller then owns discarding the redundant bytes.
    pub snapshot_adopted: bool,
    /// Snapshots evicted as a consequence; the caller releases their storage.
    pub evicted: Vec<EvictedSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictedSnapshot {
    pub node_id: NodeId,
    pub snapshot: SnapshotRef,
}

/// The operations a rollout executor needs from a cache, whether it lives
/// in-process or behind HTTP.
pub trait ToolCache: Send + Sync {
    fn get(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<Option<ToolResult>, CacheError>;
    fn prefix_match(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<PrefixMatch, CacheError>;
    fn put(
        &self,
        task_id: &str,
        q: &Trajectory,
        result: &ToolResult,
        snapshot: Option<&SnapshotRef>,
        mode: MatchMode,
    ) -> Result<PutOutcome, CacheError>;
    fn release(&self, task_id: &str, lease: &LeaseId) -> Result<Vec<EvictedSnapshot>, CacheError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub snapshot_budget: usize,
    pub lease_ttl: Duration,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { snapshot_budget: 64, lease_ttl: DEFAULT_LEASE_TTL }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    #[serde(flatten)]
    pub counters: StatsSnapshot,
    pub nodes: usize,
    pub snapshots: usize,
    pub active_leases: usize,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub global: TaskStats,
    pub tasks: BTreeMap<String, TaskStats>,
}

fn hit_rate(c: &StatsSnapshot) -> f64 {
    let n = c.hits + c.misses;
    if n == 0 {
        0.0
    } else {
        c.hits as f64 / n as f64
    }
}

pub type SharedGraph = Arc<RwLock<TaskGraph>>;

/// All task graphs of one cache instance.
pub struct Cache {
    config: CacheConfig,
    tasks: RwLock<HashMap<String, SharedGraph>>,
    persisted: Mutex<HashMap<String, u64>>,
    unknown_task_misses: AtomicU64,
}

impl Default for Cache {
    fn default() -> Self {
        Self::new(CacheConfig::default())
    }
}

impl Cache {
    pub fn new(config: CacheConfig) -> Self {
        Self {
            config,
            tasks: RwLock::new(HashMap::new()),
            persisted: Mutex::new(HashMap::new()),
            unknown_task_misses: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> CacheConfig {
        self.config
    }

    pub fn graph(&self, task_id: &str) -> Option<SharedGraph> {
        self.tasks.read().get(task_id).cloned()
    }

    fn graph_or_create(&self, task_id: &str) -> SharedGraph {
        if let Some(g) = self.graph(task_id) {
            return g;
        }
        self.tasks
            .write()
            .entry(task_id.to_string())
            .or_insert_with(|| {
                let g = TaskGraph::new(task_id, self.config.snapshot_budget).with_lease_ttl(self.config.lease_ttl);
                Arc::new(RwLock::new(g))
            })
            .clone()
    }

    /// Installs a restored graph, replacing any graph for the same task.
    /// It counts as already persisted.
    pub fn install(&self, mut graph: TaskGraph) {
        graph.set_lease_ttl(self.config.lease_ttl);
        let task = graph.task_id().to_string();
        self.persisted.lock().insert(task.clone(), graph.generation());
        self.tasks.write().insert(task, Arc::new(RwLock::new(graph)));
    }

    pub fn task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.tasks.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Tasks changed since they were last marked persisted, with their
    /// current generation.
    pub fn dirty_tasks(&self) -> Vec<(String, SharedGraph, u64)> {
        let persisted = self.persisted.lock().clone();
        let mut out: Vec<(String, SharedGraph, u64)> = self
            .tasks
            .read()
            .iter()
            .filter_map(|(id, g)| {
                let generation = g.read().generation();
                (persisted.get(id) != Some(&generation)).then(|| (id.clone(), g.clone(), generation))
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn mark_persisted(&self, task_id: &str, generation: u64) {
        self.persisted.lock().insert(task_id.to_string(), generation);
    }

    pub fn export_dot(&self, task_id: &str) -> Option<String> {
        self.graph(task_id).map(|g| export_dot(&g.read()))
    }

    /// Expires overdue leases in every task and evicts what became
    /// evictable, reporting evictions per task.
    pub fn expire_leases(&self) -> Vec<(String, Vec<EvictedSnapshot>)> {
        self.expire_leases_at(Instant::now())
    }

    pub fn expire_leases_at(&self, now: Instant) -> Vec<(String, Vec<EvictedSnapshot>)> {
        let graphs: Vec<(String, SharedGraph)> = self.tasks.read().iter().map(|(k, g)| (k.clone(), g.clone())).collect();
        let mut out = Vec::new();
        for (task, g) in graphs {
            let mut g = g.write();
            if g.expire_leases_at(now) > 0 {
                let evicted = evictions(&mut g);
                if !evicted.is_empty() {
                    out.push((task, evicted));
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn stats(&self) -> CacheStats {
        let mut tasks = BTreeMap::new();
        let mut global = TaskStats::default();
        global.counters.misses = self.unknown_task_misses.load(Ordering::Relaxed);
        for (id, g) in self.tasks.read().iter() {
            let g = g.read();
            let c = g.stats();
            let t = TaskStats {
                counters: c,
                nodes: g.node_count(),
                snapshots: g.snapshot_count(),
                active_leases: g.active_leases(),
                hit_rate: hit_rate(&c),
            };
            let gc = &mut global.counters;
            gc.hits += c.hits;
            gc.misses += c.misses;
            gc.lpm_hits += c.lpm_hits;
            gc.inserts += c.inserts;
            gc.evictions += c.evictions;
            gc.divergent_inserts += c.divergent_inserts;
            gc.leaked_leases += c.leaked_leases;
            global.nodes += t.nodes;
            global.snapshots += t.snapshots;
            global.active_leases += t.active_leases;
            tasks.insert(id.clone(), t);
        }
        global.hit_rate = hit_rate(&global.counters);
        CacheStats { global, tasks }
    }
}

fn evictions(g: &mut TaskGraph) -> Vec<EvictedSnapshot> {
    g.evict().into_iter().map(|e| EvictedSnapshot { node_id: e.node_id, snapshot: e.snapshot }).collect()
}

impl ToolCache for Cache {
    fn get(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<Option<ToolResult>, CacheError> {
        let Some(g) = self.graph(task_id) else {
            self.unknown_task_misses.fetch_add(1, Ordering::Relaxed);
            return Ok(None);
        };
        let g = g.read();
        Ok(match (mode, q.steps().split_last()) {
            (MatchMode::StatefulSkip, Some((last, history))) => {
                g.lookup_stateful(&Trajectory::new(history.to_vec()), last)
            }
            _ => g.lookup_exact(q),
        })
    }

    fn prefix_match(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<PrefixMatch, CacheError> {
        let Some(g) = self.graph(task_id) else {
            return Ok(PrefixMatch {
                matched_len: 0,
                node_id: NodeId::ROOT,
                snapshot_node_id: None,
                snapshot_depth: None,
                snapshot: None,
                lease_id: None,
            });
        };
        let key = mode.tree_key(q);
        let m = g.write().longest_prefix_match(&key);
        Ok(m)
    }

    fn put(
        &self,
        task_id: &str,
        q: &Trajectory,
        result: &ToolResult,
        snapshot: Option<&SnapshotRef>,
        mode: MatchMode,
    ) -> Result<PutOutcome, CacheError> {
        let Some((last, history)) = q.steps().split_last() else {
            return Err(CacheError::Invalid("empty trajectory".into()));
        };
        let g = self.graph_or_create(task_id);
        let mut g = g.write();
        let outcome = if mode == MatchMode::StatefulSkip && !last.mutates_state() {
            let spine: Trajectory = history.iter().filter(|s| s.mutates_state()).cloned().collect();
            let node = g.attach_stateless(&spine, last, result.clone())?;
            // The state after a stateless step equals the spine node's state.
            let adopted = snapshot.is_some_and(|s| g.adopt_snapshot(node, s.clone()));
            PutOutcome { node_id: node, created: false, snapshot_adopted: adopted, evicted: Vec::new() }
        } else {
            let key = mode.tree_key(q);
            let o = g.insert(&key, result.clone(), snapshot.cloned())?;
            PutOutcome { node_id: o.node_id, created: o.created, snapshot_adopted: o.snapshot_adopted, evicted: Vec::new() }
        };
        let evicted = if outcome.snapshot_adopted { evictions(&mut g) } else { Vec::new() };
        Ok(PutOutcome { evicted, ..outcome })
    }

    fn release(&self, task_id: &str, lease: &LeaseId) -> Result<Vec<EvictedSnapshot>, CacheError> {
        let g = self.graph(task_id).ok_or_else(|| CacheError::UnknownLease(lease.0.clone()))?;
        let mut g = g.write();
        let outcome = g.release(lease);
        // Expiry inside release may also have freed references.
        let evicted = evictions(&mut g);
        outcome?;
        Ok(evicted)
    }
}

impl<T: ToolCache + ?Sized> ToolCache for Arc<T> {
    fn get(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<Option<ToolResult>, CacheError> {
        (**self).get(task_id, q, mode)
    }
    fn prefix_match(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<PrefixMatch, CacheError> {
        (**self).prefix_match(task_id, q, mode)
    }
    fn put(
        &self,
        task_id: &str,
        q: &Trajectory,
        result: &ToolResult,
        snapshot: Option<&SnapshotRef>,
        mode: MatchMode,
    ) -> Result<PutOutcome, CacheError> {
        (**self).put(task_id, q, result, snapshot, mode)
    }
    fn release(&self, task_id: &str, lease: &LeaseId) -> Result<Vec<EvictedSnapshot>, CacheError> {
        (**self).release(task_id, lease)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcg::ToolDescriptor;

    fn d(name: &str, m: bool) -> ToolDescriptor {
        ToolDescriptor::new(name, "", m).unwrap()
    }

    fn r(s: &str) -> ToolResult {
        ToolResult::ok(s, 1.0)
    }

    fn snap(id: &str) -> SnapshotRef {
        SnapshotRef { snapshot_id: id.into(), size_bytes: 1, serialize_ms: 0.0, created_at: 0, backend_kind: "t".into() }
    }

    #[test]
    fn unknown_task_get_creates_nothing() {
        let c = Cache::default();
        assert_eq!(c.get("nope", &Trajectory::new(vec![d("a", true)]), MatchMode::Strict).unwrap(), None);
        assert!(c.task_ids().is_empty());
        assert_eq!(c.stats().global.counters.misses, 1);
    }

    #[test]
    fn stateful_put_attaches_stateless_steps() {
        let c = Cache::default();
        let m = MatchMode::StatefulSkip;
        let q1 = Trajectory::new(vec![d("w", true)]);
        c.put("t", &q1, &r("ok"), None, m).unwrap();
        let q2 = q1.with(d("read", false));
        c.put("t", &q2, &r("A"), Some(&snap("s")), m).unwrap();
        let g = c.graph("t").unwrap();
        assert_eq!(g.read().node_count(), 2);
        assert_eq!(g.read().snapshot_count(), 1, "snapshot adopted by the spine node");
        // another stateless step in between does not matter
        let q3 = q1.with(d("ls", false)).with(d("read", false));
        assert_eq!(c.get("t", &q3, m).unwrap().unwrap().payload, b"A");
        assert_eq!(c.get("t", &q3, MatchMode::Strict).unwrap(), None);
    }

    #[test]
    fn stateful_prefix_match_uses_spine() {
        let c = Cache::default();
        let m = MatchMode::StatefulSkip;
        let q1 = Trajectory::new(vec![d("w", true)]);
        c.put("t", &q1, &r("ok"), Some(&snap("s")), m).unwrap();
        let q = q1.with(d("read", false)).with(d("w2", true));
        let pm = c.prefix_match("t", &q, m).unwrap();
        assert_eq!(pm.matched_len, 1);
        assert_eq!(pm.snapshot_depth, Some(1));
        c.release("t", pm.lease_id.as_ref().unwrap()).unwrap();
    }

    #[test]
    fn put_over_budget_reports_evictions() {
        let c = Cache::new(CacheConfig { snapshot_budget: 1, ..Default::default() });
        let a = Trajectory::new(vec![d("a", true)]);
        let b = Trajectory::new(vec![d("b", true)]);
        assert!(c.put("t", &a, &r(""), Some(&snap("sa")), MatchMode::Strict).unwrap().evicted.is_empty());
        let out = c.put("t", &b, &r(""), Some(&snap("sb")), MatchMode::Strict).unwrap();
        assert_eq!(out.evicted.len(), 1);
        assert_eq!(c.graph("t").unwrap().read().snapshot_count(), 1);
    }

    #[test]
    fn release_evicts_deferred_snapshots() {
        let c = Cache::new(CacheConfig { snapshot_budget: 2, ..Default::default() });
        let a = Trajectory::new(vec![d("a", true)]);
        let b = Trajectory::new(vec![d("b", true)]);
        c.put("t", &a, &r(""), Some(&snap("sa")), MatchMode::Strict).unwrap();
        c.put("t", &b, &r(""), Some(&snap("sb")), MatchMode::Strict).unwrap();
        let la = c.prefix_match("t", &a.with(d("x", true)), MatchMode::Strict).unwrap().lease_id.unwrap();
        let lb = c.prefix_match("t", &b.with(d("x", true)), MatchMode::Strict).unwrap().lease_id.unwrap();
        c.graph("t").unwrap().write().set_snapshot_budget(1);
        let evicted = c.release("t", &la).unwrap();
        assert_eq!(evicted.iter().map(|e| e.snapshot.snapshot_id.as_str()).collect::<Vec<_>>(), ["sa"]);
        assert!(matches!(c.release("t", &la), Err(CacheError::UnknownLease(_))));
        assert!(c.release("t", &lb).unwrap().is_empty());
    }

    #[test]
    fn dirty_tracking_ignores_hits() {
        let c = Cache::default();
        let a = Trajectory::new(vec![d("a", true)]);
        c.put("t", &a, &r(""), None, MatchMode::Strict).unwrap();
        let dirty = c.dirty_tasks();
        assert_eq!(dirty.len(), 1);
        c.mark_persisted("t", dirty[0].2);
        c.get("t", &a, MatchMode::Strict).unwrap();
        assert!(c.dirty_tasks().is_empty());
        c.put("t", &a.with(d("b", true)), &r(""), None, MatchMode::Strict).unwrap();
        assert_eq!(c.dirty_tasks().len(), 1);
    }

    #[test]
    fn stats_hit_rate_is_exact() {
        let c = Cache::default();
        let a = Trajectory::new(vec![d("a", true)]);
        c.put("t", &a, &r(""), None, MatchMode::Strict).unwrap();
        for i in 0..10 {
            let q = if i % 5 == 0 { a.with(d("z", true)) } else { a.clone() };
            c.get("t", &q, MatchMode::Strict).unwrap();
        }
        let s = c.stats();
        assert_eq!(s.global.counters.hits, 8);
        assert_eq!(s.global.counters.misses, 2);
        assert_eq!(s.tasks["t"].hit_rate, 0.8);
    }

    #[test]
    fn expired_leases_free_deferred_evictions() {
        let cache = Cache::new(CacheConfig { snapshot_budget: 2, lease_ttl: Duration::from_secs(5) });
        let q1 = Trajectory::new(vec![d("a", true)]);
        let q2 = Trajectory::new(vec![d("b", true)]);
        cache.put("t", &q1, &r("1"), Some(&snap("s1")), MatchMode::Strict).unwrap();
        cache.put("t", &q2, &r("2"), Some(&snap("s2")), MatchMode::Strict).unwrap();
        for q in [&q1, &q2] {
            let m = cache.prefix_match("t", &q.with(d("x", true)), MatchMode::Strict).unwrap();
            assert!(m.lease_id.is_some());
        }
        let g = cache.graph("t").unwrap();
        g.write().set_snapshot_budget(1);
        assert!(g.write().evict().is_empty(), "both snapshots are pinned");
        assert!(cache.expire_leases().is_empty());
        let expired = cache.expire_leases_at(Instant::now() + Duration::from_secs(6));
        assert_eq!(expired.len(), 1);
        assert_eq!(expired[0].0, "t");
        assert_eq!(expired[0].1.len(), 1);
        assert_eq!(g.read().snapshot_count(), 1);
        assert_eq!(g.read().stats().leaked_leases, 2);
    }
}
