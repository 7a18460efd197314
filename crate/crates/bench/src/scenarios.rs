//! Self-checking scenarios. Each returns a report with violation counts
//! rather than panicking, so callers can print a verdict.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use tvcache_core::cache::{Cache, CacheConfig, EvictedSnapshot, MatchMode, ToolCache};
use tvcache_core::executor::{fresh_execution, Executor};
use tvcache_core::forkpool::{ForkPool, ForkPoolConfig};
use tvcache_core::sandbox::{Backend, FileTreeBackend, FileTreeConfig};
use tvcache_core::snapshot::{CostModel, SnapshotPolicy, SnapshotStore};
use tvcache_core::tcg::{LeaseId, NodeId, ToolDescriptor, ToolResult, Trajectory};

use crate::run::{expected_hits_strict, run, BenchError, RunOptions};
use crate::mean;
use crate::workload::{generate, task_id, LenRange, Workload, WorkloadSpec};

fn executor(cache: Arc<dyn ToolCache>, policy: SnapshotPolicy, prewarm: bool) -> Executor {
    let backend: Arc<dyn Backend> = Arc::new(FileTreeBackend::default());
    let store = Arc::new(SnapshotStore::in_memory(u64::MAX, Arc::new(CostModel::default())));
    let pool = Arc::new(ForkPool::new(backend, store, ForkPoolConfig { prewarm_enabled: prewarm, workers: 2, ..Default::default() }));
    Executor::new(cache, pool, policy)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub sets: usize,
    pub rollouts: usize,
    pub calls: usize,
    pub mismatches: usize,
    pub lease_imbalances: usize,
    pub first_mismatch: Option<String>,
}

/// Random rollout sets of `tasks` x `rollouts` on file tree sandboxes, each
/// with its own cache, spec, mode and snapshot policy. Every returned result
/// is compared with fresh execution of the rollout's full trajectory. Odd
/// sets run all rollouts of the set concurrently.
pub fn oracle_sets(sets: usize, tasks: usize, rollouts: usize, max_len: usize, seed: u64) -> OracleReport {
    let oracle = FileTreeBackend::default();
    let mut rep = OracleReport { sets, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for set in 0..sets {
        let spec = WorkloadSpec {
            tasks,
            rollouts_per_task: rollouts,
            epochs: 1,
            trajectory_len: LenRange { min: 1, max: max_len },
            branch_prob: rng.gen_range(0.0..=1.0),
            stateless_frac: rng.gen_range(0.0..=1.0),
            alternatives: rng.gen_range(2..=4),
            mode: if rng.gen_bool(0.5) { MatchMode::Strict } else { MatchMode::StatefulSkip },
            seed: rng.gen(),
            ..Default::default()
        };
        let policy = [SnapshotPolicy::Always, SnapshotPolicy::Selective, SnapshotPolicy::Never][rng.gen_range(0..3)];
        let budget = rng.gen_range(1..=8);
        let cache = Arc::new(Cache::new(CacheConfig { snapshot_budget: budget, ..Default::default() }));
        let exec = executor(cache.clone(), policy, rng.gen_bool(0.5));
        let w = generate(&spec);
        let play = |steps: &[ToolDescriptor], task: usize| -> Vec<ToolResult> {
            let mut s = exec.start_rollout(task_id(task), spec.mode);
            let out = steps.iter().map(|d| exec.call_tool(&mut s, d)).collect();
            exec.end_rollout(s);
            out
        };
        let results: Vec<Vec<ToolResult>> = if set % 2 == 1 {
            std::thread::scope(|sc| {
                let hs: Vec<_> = w.rollouts.iter().map(|r| sc.spawn(|| play(&r.steps, r.task))).collect();
                hs.into_iter().map(|h| h.join().expect("rollout thread")).collect()
            })
        } else {
            w.rollouts.iter().map(|r| play(&r.steps, r.task)).collect()
        };
        for (r, got) in w.rollouts.iter().zip(&results) {
            rep.rollouts += 1;
            rep.calls += got.len();
            let expected = fresh_execution(&oracle, &Trajectory::new(r.steps.clone()));
            for (i, (g, e)) in got.iter().zip(&expected).enumerate() {
                if !g.same_value(e) {
                    rep.mismatches += 1;
                    rep.first_mismatch.get_or_insert_with(|| {
                        format!("set {set} task {} step {i}: got {:?}, fresh {:?}", r.task, g.payload_lossy(), e.payload_lossy())
                    });
                }
            }
        }
        exec.pool().wait_idle();
        let st = exec.stats();
        let pinned = cache.task_ids().iter().any(|t| {
            cache.graph(t).is_some_and(|g| g.read().nodes().any(|n| n.ref_count() > 0))
        });
        if st.leases_acquired != st.leases_released || pinned {
            rep.lease_imbalances += 1;
        }
    }
    rep
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trajectories: usize,
    pub calls: usize,
    /// Calls where strict, stateful or fresh execution disagreed.
    pub mismatches: usize,
    pub strict_hits: u64,
    pub stateful_hits: u64,
    pub reordered_pairs: usize,
    /// Pairs where stateful matching scored fewer hits than strict.
    pub reordered_worse: usize,
    pub reordered_strictly_better: usize,
}

/// Two mutating and two read-only file tree tools.
pub fn equivalence_alphabet() -> Vec<ToolDescriptor> {
    let b = FileTreeBackend::default();
    vec![
        b.describe("write", &json!({"path": "a", "content": "x"})).expect("valid"),
        b.describe("append", &json!({"path": "a", "content": "y"})).expect("valid"),
        b.describe("read", &json!({"path": "a"})).expect("valid"),
        b.describe("ls", &json!({})).expect("valid"),
    ]
}

fn all_sequences(alphabet: &[ToolDescriptor], max_len: usize) -> Vec<Vec<ToolDescriptor>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<ToolDescriptor>> = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|p| alphabet.iter().map(move |d| {
                let mut q = p.clone();
                q.push(d.clone());
                q
            }))
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

fn hits_of_second(first: &[ToolDescriptor], second: &[ToolDescriptor], mode: MatchMode) -> (u64, Vec<ToolResult>) {
    let exec = executor(Arc::new(Cache::new(CacheConfig::default())), SnapshotPolicy::Always, false);
    let mut s = exec.start_rollout("pair", mode);
    for d in first {
        exec.call_tool(&mut s, d);
    }
    exec.end_rollout(s);
    let mut s = exec.start_rollout("pair", mode);
    let results = second.iter().map(|d| exec.call_tool(&mut s, d)).collect();
    (exec.end_rollout(s).hits, results)
}

/// Every trajectory up to `max_len` over [`equivalence_alphabet`], played
/// through a strict and a stateful-skip executor in the same order, each
/// call compared with fresh execution. Then every trajectory with two
/// adjacent distinct read-only steps is paired with its swapped version and
/// the second rollout's hits compared in fresh caches.
pub fn stateful_equivalence(max_len: usize) -> EquivalenceReport {
    let alphabet = equivalence_alphabet();
    let oracle = FileTreeBackend::default();
    let strict = executor(Arc::new(Cache::new(CacheConfig { snapshot_budget: 16, ..Default::default() })), SnapshotPolicy::Always, false);
    let stateful = executor(Arc::new(Cache::new(CacheConfig { snapshot_budget: 16, ..Default::default() })), SnapshotPolicy::Always, false);
    let mut rep = EquivalenceReport::default();
    let seqs = all_sequences(&alphabet, max_len);
    for q in &seqs {
        rep.trajectories += 1;
        rep.calls += q.len();
        let fresh = fresh_execution(&oracle, &Trajectory::new(q.clone()));
        let mut a = strict.start_rollout("eq", MatchMode::Strict);
        let mut b = stateful.start_rollout("eq", MatchMode::StatefulSkip);
        for (d, f) in q.iter().zip(&fresh) {
            let (ra, rb) = (strict.call_tool(&mut a, d), stateful.call_tool(&mut b, d));
            if !(ra.same_value(f) && rb.same_value(f)) {
                rep.mismatches += 1;
            }
        }
        rep.strict_hits += strict.end_rollout(a).hits;
        rep.stateful_hits += stateful.end_rollout(b).hits;
    }
    for q in &seqs {
        for i in 0..q.len().saturating_sub(1) {
            let (x, y) = (&q[i], &q[i + 1]);
            if x.mutates_state() || y.mutates_state() || x == y {
                continue;
            }
            let mut swapped = q.clone();
            swapped.swap(i, i + 1);
            let (hs, rs) = hits_of_second(q, &swapped, MatchMode::Strict);
            let (hf, rf) = hits_of_second(q, &swapped, MatchMode::StatefulSkip);
            let fresh = fresh_execution(&oracle, &Trajectory::new(swapped.clone()));
            rep.mismatches += rs.iter().zip(&rf).zip(&fresh).filter(|((a, b), f)| !(a.same_value(f) && b.same_value(f))).count();
            rep.reordered_pairs += 1;
            rep.reordered_worse += usize::from(hf < hs);
            rep.reordered_strictly_better += usize::from(hf > hs);
        }
    }
    rep
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefcountReport {
    pub iterations: usize,
    pub ops: HashMap<String, usize>,
    pub evictions: usize,
    pub violations: usize,
    pub first_violation: Option<String>,
    pub drain_checks: usize,
    pub budget: usize,
    pub final_snapshots: usize,
}

struct Schedule {
    task: String,
    cache: Arc<Cache>,
    pool: Arc<ForkPool>,
    root_bytes: Vec<u8>,
    leases: Vec<(LeaseId, NodeId)>,
    known: Vec<Trajectory>,
    rep: RefcountReport,
}

impl Schedule {
    fn violation(&mut self, msg: String) {
        self.rep.violations += 1;
        self.rep.first_violation.get_or_insert(msg);
    }

    /// An evicted node may not be, or be an ancestor of, a pinned node.
    fn check_evicted(&mut self, evicted: &[EvictedSnapshot], op: &str) {
        let g = self.cache.graph(&self.task).expect("task exists");
        let pinned_ancestry: HashSet<NodeId> = {
            let g = g.read();
            let mut set = HashSet::new();
            for (_, n) in &self.leases {
                let mut cur = Some(*n);
                while let Some(id) = cur {
                    set.insert(id);
                    cur = g.node(id).and_then(|x| x.parent());
                }
            }
            set
        };
        for e in evicted {
            self.rep.evictions += 1;
            if pinned_ancestry.contains(&e.node_id) {
                self.violation(format!("{op} evicted {:?} under a live lease", e.node_id));
            }
            self.pool.discard(&self.task, e.node_id, &e.snapshot.snapshot_id);
            let _ = self.pool.store().drop_ref(&e.snapshot);
        }
    }

    fn check_pins(&mut self, op: &str) {
        let g = self.cache.graph(&self.task).expect("task exists");
        let mut counts: HashMap<NodeId, u32> = HashMap::new();
        for (_, n) in &self.leases {
            *counts.entry(*n).or_default() += 1;
        }
        let problems: Vec<String> = {
            let g = g.read();
            g.nodes()
                .filter_map(|n| {
                    let want = counts.get(&n.id()).copied().unwrap_or(0);
                    if n.ref_count() != want {
                        Some(format!("after {op}: node {:?} ref_count {} but {want} live leases", n.id(), n.ref_count()))
                    } else if want > 0 && n.snapshot().is_none() {
                        Some(format!("after {op}: pinned node {:?} lost its snapshot", n.id()))
                    } else {
                        None
                    }
                })
                .collect()
        };
        for p in problems {
            self.violation(p);
        }
    }

    fn drain(&mut self) {
        self.rep.drain_checks += 1;
        for (lease, _) in std::mem::take(&mut self.leases) {
            match self.cache.release(&self.task, &lease) {
                Ok(ev) => self.check_evicted(&ev, "release"),
                Err(e) => self.violation(format!("release of live lease failed: {e}")),
            }
        }
        let g = self.cache.graph(&self.task).expect("task exists");
        let ev: Vec<EvictedSnapshot> =
            g.write().evict().into_iter().map(|e| EvictedSnapshot { node_id: e.node_id, snapshot: e.snapshot }).collect();
        self.check_evicted(&ev, "evict");
        let (count, budget) = {
            let g = g.read();
            (g.snapshot_count(), g.snapshot_budget())
        };
        if count > budget {
            self.violation(format!("{count} snapshots over budget {budget} with no live leases"));
        }
    }
}

/// A random schedule of inserts with snapshots, prefix matches (which take
/// leases), releases, explicit evictions and prewarms against one task with
/// a small snapshot budget. After every operation the model of live leases
/// must agree with the graph's ref counts and pinned snapshots must still
/// exist; whenever the leases are drained the graph must fit its budget.
pub fn refcount_schedule(iterations: usize, budget: usize, seed: u64) -> RefcountReport {
    let backend: Arc<dyn Backend> = Arc::new(FileTreeBackend::default());
    let store = Arc::new(SnapshotStore::in_memory(u64::MAX, Arc::new(CostModel::default())));
    let pool = Arc::new(ForkPool::new(backend.clone(), store, ForkPoolConfig { workers: 2, ..Default::default() }));
    let root = backend.start().expect("root");
    let mut s = Schedule {
        task: "refcount".into(),
        cache: Arc::new(Cache::new(CacheConfig { snapshot_budget: budget, ..Default::default() })),
        pool,
        root_bytes: backend.snapshot(&root).expect("snapshot"),
        leases: Vec::new(),
        known: vec![Trajectory::empty()],
        rep: RefcountReport { iterations, budget, ..Default::default() },
    };
    let alphabet: Vec<ToolDescriptor> =
        (0..4).map(|i| ToolDescriptor::new(format!("t{i}"), "", true).expect("valid")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Seed the task so the graph exists.
    let first = Trajectory::new(vec![alphabet[0].clone()]);
    s.cache.put(&s.task, &first, &ToolResult::ok("t0", 1.0), None, MatchMode::Strict).expect("seed put");
    s.known.push(first);

    for i in 0..iterations {
        let op = ["insert", "prefix_match", "release", "evict", "prewarm"][rng.gen_range(0..5)];
        *s.rep.ops.entry(op.to_string()).or_default() += 1;
        match op {
            "insert" => {
                let mut base = s.known.choose(&mut rng).expect("non-empty").clone();
                if base.len() >= 6 {
                    base = base.prefix(rng.gen_range(0..6));
                }
                let q = base.with(alphabet.choose(&mut rng).expect("non-empty").clone());
                let snap = s.pool.store().store(&s.root_bytes, backend.kind(), 0.1).expect("store");
                match s.cache.put(&s.task, &q, &ToolResult::ok("r", 1.0), Some(&snap), MatchMode::Strict) {
                    Ok(out) => {
                        if !out.snapshot_adopted {
                            let _ = s.pool.store().drop_ref(&snap);
                        }
                        s.check_evicted(&out.evicted, "put");
                        if out.created {
                            s.known.push(q);
                        }
                    }
                    Err(e) => s.violation(format!("put of known prefix failed: {e}")),
                }
            }
            "prefix_match" => {
                let q = s.known.choose(&mut rng).expect("non-empty").with(alphabet.choose(&mut rng).expect("non-empty").clone());
                match s.cache.prefix_match(&s.task, &q, MatchMode::Strict) {
                    Ok(m) => {
                        if let (Some(lease), Some(node)) = (m.lease_id, m.snapshot_node_id) {
                            s.leases.push((lease, node));
                        }
                    }
                    Err(e) => s.violation(format!("prefix_match failed: {e}")),
                }
            }
            "release" => {
                if !s.leases.is_empty() {
                    let (lease, _) = s.leases.swap_remove(rng.gen_range(0..s.leases.len()));
                    match s.cache.release(&s.task, &lease) {
                        Ok(ev) => s.check_evicted(&ev, "release"),
                        Err(e) => s.violation(format!("release of live lease failed: {e}")),
                    }
                }
            }
            "evict" => {
                let g = s.cache.graph(&s.task).expect("task exists");
                let ev: Vec<EvictedSnapshot> =
                    g.write().evict().into_iter().map(|e| EvictedSnapshot { node_id: e.node_id, snapshot: e.snapshot }).collect();
                s.check_evicted(&ev, "evict");
            }
            _ => {
                let g = s.cache.graph(&s.task).expect("task exists");
                let with_snap: Vec<(NodeId, tvcache_core::snapshot::SnapshotRef)> =
                    g.read().nodes().filter_map(|n| n.snapshot().map(|r| (n.id(), r.clone()))).collect();
                if let Some((node, snap)) = with_snap.choose(&mut rng) {
                    s.pool.prewarm_for_node(&s.task, *node, snap);
                }
            }
        }
        s.check_pins(op);
        if (i + 1) % 1000 == 0 {
            s.drain();
        }
    }
    s.drain();
    s.pool.wait_idle();
    let g = s.cache.graph(&s.task).expect("task exists");
    let g = g.read();
    s.rep.final_snapshots = g.snapshot_count();
    let live: Vec<NodeId> = g.nodes().filter(|n| n.snapshot().is_none()).map(|n| n.id()).collect();
    drop(g);
    for n in live {
        if s.pool.has_prewarmed(&s.task, n) {
            s.violation(format!("prewarmed sandbox kept for evicted node {n:?}"));
        }
    }
    if s.pool.store().len() != s.rep.final_snapshots {
        let msg = format!("store holds {} snapshots, graph {}", s.pool.store().len(), s.rep.final_snapshots);
        s.violation(msg);
    }
    s.rep
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub decisions: usize,
    pub snapshots_taken: usize,
    pub nodes_with_snapshots: usize,
    pub violations: usize,
    pub first_violation: Option<String>,
}

/// Runs `spec` under the selective policy with the given sandbox snapshot
/// costs and checks that every snapshot decision follows the cost rule and
/// every snapshot left in the graph came from a call that beat the
/// overhead estimate in force when it was taken.
pub fn snapshot_policy_audit(spec: &WorkloadSpec, sandbox: FileTreeConfig) -> Result<PolicyReport, BenchError> {
    let cache = Arc::new(Cache::new(CacheConfig { snapshot_budget: 1024, ..Default::default() }));
    let w = generate(spec);
    let r = run(&w, &RunOptions { cache: Some(cache.clone()), sandbox, ..Default::default() })?;
    let mut rep = PolicyReport { decisions: r.audit.len(), ..Default::default() };
    let mut justified = HashSet::new();
    for d in &r.audit {
        if d.snapshot != (d.exec_ms > d.overhead_ms) {
            rep.violations += 1;
            rep.first_violation.get_or_insert_with(|| format!("{d:?}"));
        }
        if let Some(id) = &d.snapshot_id {
            rep.snapshots_taken += 1;
            if d.exec_ms > d.overhead_ms {
                justified.insert(id.clone());
            }
        }
    }
    for t in cache.task_ids() {
        let g = cache.graph(&t).expect("listed task");
        for n in g.read().nodes() {
            if let Some(snap) = n.snapshot() {
                rep.nodes_with_snapshots += 1;
                if !justified.contains(&snap.snapshot_id) {
                    rep.violations += 1;
                    rep.first_violation.get_or_insert_with(|| format!("node {:?} holds unjustified {}", n.id(), snap.snapshot_id));
                }
            }
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub tool_calls: u64,
    pub predicted_hit_rate: f64,
    pub hit_rate: f64,
    pub predicted_mean_uncached_ms: f64,
    pub predicted_mean_cached_ms: f64,
    /// Ratio of predicted mean per-call times.
    pub predicted_speedup: f64,
    pub mean_uncached_ms: f64,
    pub mean_cached_ms: f64,
    /// Ratio of measured mean per-call times.
    pub mean_speedup: f64,
    /// `mean_speedup / predicted_speedup - 1`.
    pub relative_error: f64,
    pub median_uncached_ms: f64,
    pub median_cached_ms: f64,
    /// Ratio of measured median per-call times.
    pub speedup: f64,
    pub identical_results: bool,
}

/// Simulated cost of a generated step.
pub fn step_cost_ms(d: &ToolDescriptor) -> f64 {
    d.args().and_then(|a| a.get("ms").and_then(|v| v.as_f64())).unwrap_or(0.0)
}

/// Expected per-call time of a sequential strict-mode cached run under the
/// selective policy, from the trace alone. A hit costs nothing. The first
/// miss of a rollout forks from the deepest snapshotted step of its matched
/// prefix (a prewarmed copy, so free) and replays the steps after it. Every
/// executed step costs its own duration, plus `serialize_ms` when that
/// duration beats `overhead_ms` and a snapshot is taken. With snapshots on
/// every step above the overhead, only cheaper steps are ever replayed.
pub fn predicted_cached_ms(w: &Workload, overhead_ms: f64, serialize_ms: f64) -> Vec<f64> {
    let hits = expected_hits_strict(w);
    let exec = |d: &ToolDescriptor| {
        let c = step_cost_ms(d);
        c + if c > overhead_ms { serialize_ms } else { 0.0 }
    };
    let mut out = Vec::with_capacity(w.tool_calls());
    for (r, &h) in w.rollouts.iter().zip(&hits) {
        let h = h as usize;
        for (i, d) in r.steps.iter().enumerate() {
            out.push(if i < h {
                0.0
            } else if i == h {
                let from = r.steps[..h].iter().rposition(|s| step_cost_ms(s) > overhead_ms).map_or(0, |j| j + 1);
                r.steps[from..h].iter().map(exec).sum::<f64>() + exec(d)
            } else {
                exec(d)
            });
        }
    }
    out
}

/// Computes the expectation from the trace and sandbox costs, then
/// measures paired uncached and cached runs. Strict mode only.
pub fn speedup(spec: &WorkloadSpec, sandbox: FileTreeConfig) -> Result<SpeedupReport, BenchError> {
    assert_eq!(spec.mode, MatchMode::Strict, "the expectation models strict matching");
    let w = generate(spec);
    let calls = w.tool_calls() as u64;
    let predicted_hits: u64 = expected_hits_strict(&w).iter().sum();
    let predicted_uncached = mean(&w.rollouts.iter().flat_map(|r| r.steps.iter().map(step_cost_ms)).collect::<Vec<_>>());
    let predicted_cached = mean(&predicted_cached_ms(&w, sandbox.snapshot_ms + sandbox.restore_ms, sandbox.snapshot_ms));

    let uncached = run(&w, &RunOptions { cached: false, sandbox: sandbox.clone(), ..Default::default() })?.report;
    let cached = run(&w, &RunOptions { sandbox, ..Default::default() })?.report;
    let predicted_speedup = predicted_uncached / predicted_cached;
    let mean_speedup = uncached.mean_tool_ms / cached.mean_tool_ms;
    Ok(SpeedupReport {
        tool_calls: calls,
        predicted_hit_rate: predicted_hits as f64 / calls as f64,
        hit_rate: cached.hit_rate,
        predicted_mean_uncached_ms: predicted_uncached,
        predicted_mean_cached_ms: predicted_cached,
        predicted_speedup,
        mean_uncached_ms: uncached.mean_tool_ms,
        mean_cached_ms: cached.mean_tool_ms,
        mean_speedup,
        relative_error: mean_speedup / predicted_speedup - 1.0,
        median_uncached_ms: uncached.median_tool_ms,
        median_cached_ms: cached.median_tool_ms,
        speedup: uncached.median_tool_ms / cached.median_tool_ms,
        identical_results: cached.results_digest == uncached.results_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::CostMix;

    #[test]
    fn small_oracle_run_is_clean() {
        let rep = oracle_sets(6, 2, 4, 6, 3);
        assert_eq!((rep.mismatches, rep.lease_imbalances), (0, 0), "{rep:?}");
        assert_eq!(rep.rollouts, 48);
    }

    #[test]
    fn short_equivalence_run() {
        let rep = stateful_equivalence(3);
        assert_eq!(rep.trajectories, 4 + 16 + 64);
        assert_eq!((rep.mismatches, rep.reordered_worse), (0, 0));
        assert!(rep.stateful_hits >= rep.strict_hits);
        assert!(rep.reordered_strictly_better > 0);
    }

    #[test]
    fn short_refcount_schedule() {
        let rep = refcount_schedule(2500, 3, 9);
        assert_eq!(rep.violations, 0, "{rep:?}");
        assert!(rep.evictions > 0);
        assert!(rep.final_snapshots <= 3);
        assert_eq!(rep.drain_checks, 3);
        assert_eq!(rep.ops.values().sum::<usize>(), 2500);
    }

    #[test]
    fn expectation_on_a_hand_built_trace() {
        let spec = WorkloadSpec {
            tasks: 1,
            rollouts_per_task: 2,
            trajectory_len: LenRange { min: 4, max: 4 },
            tool_cost: CostMix::bimodal(0.5, 5.0, 2000.0),
            branch_prob: 0.0,
            seed: 4,
            ..Default::default()
        };
        let mut w = generate(&spec);
        let costs: Vec<f64> = w.rollouts[0].steps.iter().map(step_cost_ms).collect();
        let exec = |c: f64| c + if c > 100.0 { 50.0 } else { 0.0 };
        // Identical rollouts: the first executes everything, the second hits.
        let p = predicted_cached_ms(&w, 100.0, 50.0);
        assert_eq!(p[..4].to_vec(), costs.iter().map(|&c| exec(c)).collect::<Vec<_>>());
        assert_eq!(p[4..].to_vec(), vec![0.0; 4]);
        // Diverging at the last step replays the steps after the deepest
        // expensive one.
        w.rollouts[1].steps[3] = crate::workload::step(&spec, 0, 3, 1);
        let p = predicted_cached_ms(&w, 100.0, 50.0);
        let from = costs[..3].iter().rposition(|&c| c > 100.0).map_or(0, |j| j + 1);
        let replay: f64 = costs[from..3].iter().map(|&c| exec(c)).sum();
        assert_eq!(p[7], replay + exec(step_cost_ms(&w.rollouts[1].steps[3])));
        assert_eq!(p[4..7].to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn policy_audit_with_small_costs() {
        let spec = WorkloadSpec {
            tasks: 1,
            rollouts_per_task: 3,
            trajectory_len: LenRange { min: 4, max: 4 },
            tool_cost: CostMix::bimodal(0.5, 0.5, 30.0),
            branch_prob: 0.4,
            seed: 2,
            ..Default::default()
        };
        let sandbox = FileTreeConfig { snapshot_ms: 3.0, restore_ms: 3.0, ..Default::default() };
        let rep = snapshot_policy_audit(&spec, sandbox).unwrap();
        assert_eq!(rep.violations, 0, "{rep:?}");
        assert!(rep.decisions > 0);
    }
}
