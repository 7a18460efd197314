//! Replays a workload through the cached executor or directly against
//! sandboxes, timing every tool call.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use tvcache_core::cache::{Cache, CacheConfig, ToolCache};
use tvcache_core::executor::{fresh_execution, Executor, SnapshotDecision};
use tvcache_core::forkpool::{ForkPool, ForkPoolConfig};
use tvcache_core::sandbox::{Backend, FileTreeBackend, FileTreeConfig};
use tvcache_core::snapshot::{CostEstimate, CostModel, SnapshotPolicy, SnapshotStore};
use tvcache_core::tcg::{fnv1a64, ToolResult, Trajectory};

use crate::sweep::SweepCell;
use crate::workload::{task_id, without_cost, Workload, WorkloadSpec};
use crate::{mean, percentile};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("rollout {rollout} step {step}: cached result {got:?} differs from fresh execution {expected:?}")]
    Mismatch { rollout: usize, step: usize, expected: String, got: String },
    #[error(transparent)]
    Spec(#[from] crate::workload::SpecError),
}

#[derive(Clone)]
pub struct RunOptions {
    pub cached: bool,
    pub policy: SnapshotPolicy,
    pub snapshot_budget: usize,
    /// Simulated sandbox lifecycle costs.
    pub sandbox: FileTreeConfig,
    /// Cache to run against; a fresh in-process cache when None.
    pub cache: Option<Arc<dyn ToolCache>>,
    /// Compare every cached result with fresh execution.
    pub verify: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            cached: true,
            policy: SnapshotPolicy::Selective,
            snapshot_budget: 64,
            sandbox: FileTreeConfig::default(),
            cache: None,
            verify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cached: bool,
    pub spec: WorkloadSpec,
    pub tool_calls: u64,
    pub hits: u64,
    pub hit_rate: f64,
    pub hit_rate_by_epoch: Vec<f64>,
    /// Lower median of per-call wall time.
    pub median_tool_ms: f64,
    pub p95_tool_ms: f64,
    pub mean_tool_ms: f64,
    pub rollout_wall_ms: Vec<f64>,
    /// Slowest rollout of each (epoch, task) batch.
    pub batch_wall_ms: Vec<f64>,
    pub executed_tools: u64,
    pub replayed_tools: u64,
    pub snapshots_stored: u64,
    pub leases_acquired: u64,
    pub leases_released: u64,
    /// Hash over every returned result in order; equal across paired runs.
    pub results_digest: String,
    #[serde(default)]
    pub p95_get_latency_by_rps: Vec<SweepCell>,
}

/// A report plus the raw per-call measurements.
pub struct BenchRun {
    pub report: BenchReport,
    pub tool_ms: Vec<f64>,
    pub hit: Vec<bool>,
    pub audit: Vec<SnapshotDecision>,
}

struct Digest(u64);

impl Digest {
    fn add(&mut self, r: &ToolResult) {
        let mut buf = self.0.to_le_bytes().to_vec();
        buf.push(r.is_ok() as u8);
        buf.extend_from_slice(&r.payload);
        self.0 = fnv1a64(&buf);
    }
}

/// Seeds the snapshot cost model for `backend` from a few measured
/// snapshot and restore round trips of a fresh sandbox.
pub fn calibrate(backend: &dyn Backend, cost: &CostModel, reps: usize) -> CostEstimate {
    let mut h = backend.start().expect("calibration sandbox starts");
    let (mut ser, mut res) = (0.0, 0.0);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let bytes = backend.snapshot(&h).expect("snapshot");
        ser += t.elapsed().as_secs_f64() * 1000.0;
        let t = Instant::now();
        let mut restored = backend.restore(&bytes).expect("restore");
        res += t.elapsed().as_secs_f64() * 1000.0;
        backend.stop(&mut restored);
    }
    backend.stop(&mut h);
    let n = reps.max(1) as f64;
    let est = CostEstimate { serialize_ms_ema: ser / n, restore_ms_ema: res / n };
    cost.set_estimate(backend.kind(), est);
    est
}

pub fn run(workload: &Workload, opts: &RunOptions) -> Result<BenchRun, BenchError> {
    workload.spec.validate()?;
    let backend: Arc<dyn Backend> = Arc::new(FileTreeBackend::new(opts.sandbox.clone()));
    let oracle = FileTreeBackend::default();
    let mut digest = Digest(0);
    let mut tool_ms = Vec::with_capacity(workload.tool_calls());
    let mut hit = Vec::with_capacity(workload.tool_calls());
    let mut rollout_wall_ms = Vec::with_capacity(workload.rollouts.len());
    let mut hits_by_epoch = vec![(0u64, 0u64); workload.spec.epochs];
    let (mut executed, mut replayed) = (0, 0);

    let exec = opts.cached.then(|| {
        let cost = Arc::new(CostModel::default());
        calibrate(backend.as_ref(), &cost, 3);
        let store = Arc::new(SnapshotStore::in_memory(u64::MAX, cost));
        let pool = Arc::new(ForkPool::new(backend.clone(), store, ForkPoolConfig::default()));
        let cache = opts.cache.clone().unwrap_or_else(|| {
            Arc::new(Cache::new(CacheConfig { snapshot_budget: opts.snapshot_budget, ..Default::default() }))
        });
        Executor::new(cache, pool, opts.policy).with_audit()
    });

    for (ri, rollout) in workload.rollouts.iter().enumerate() {
        let started = Instant::now();
        let results: Vec<ToolResult> = match &exec {
            Some(exec) => {
                let mut session = exec.start_rollout(task_id(rollout.task), workload.spec.mode);
                let results = rollout
                    .steps
                    .iter()
                    .map(|d| {
                        let t = Instant::now();
                        let r = exec.call_tool(&mut session, d);
                        tool_ms.push(t.elapsed().as_secs_f64() * 1000.0);
                        hit.push(session.decisions().last().is_some_and(|d| d.is_hit()));
                        r
                    })
                    .collect();
                let report = exec.end_rollout(session);
                executed += report.executed_tools;
                replayed += report.replayed_tools;
                results
            }
            None => {
                let mut h = backend.start().expect("file tree sandboxes start");
                let results = rollout
                    .steps
                    .iter()
                    .map(|d| {
                        let t = Instant::now();
                        let r = backend
                            .execute(&mut h, d)
                            .unwrap_or_else(|e| ToolResult::tool_error(format!("sandbox failure: {e}"), 0.0));
                        tool_ms.push(t.elapsed().as_secs_f64() * 1000.0);
                        hit.push(false);
                        r
                    })
                    .collect();
                backend.stop(&mut h);
                executed += rollout.steps.len() as u64;
                results
            }
        };
        rollout_wall_ms.push(started.elapsed().as_secs_f64() * 1000.0);

        if opts.cached && opts.verify {
            let bare = Trajectory::new(rollout.steps.iter().map(without_cost).collect());
            for (step, (got, expected)) in results.iter().zip(fresh_execution(&oracle, &bare)).enumerate() {
                if !got.same_value(&expected) {
                    return Err(BenchError::Mismatch {
                        rollout: ri,
                        step,
                        expected: expected.payload_lossy(),
                        got: got.payload_lossy(),
                    });
                }
            }
        }
        let n = rollout.steps.len();
        let h = hit[hit.len() - n..].iter().filter(|&&b| b).count() as u64;
        let e = &mut hits_by_epoch[rollout.epoch];
        e.0 += h;
        e.1 += n as u64;
        for r in &results {
            digest.add(r);
        }
    }

    let batch_wall_ms =
        rollout_wall_ms.chunks(workload.spec.rollouts_per_task).map(|b| b.iter().copied().fold(0.0, f64::max)).collect();
    let hits: u64 = hits_by_epoch.iter().map(|e| e.0).sum();
    let calls = tool_ms.len() as u64;
    let (stats, audit) = match &exec {
        Some(exec) => {
            exec.pool().wait_idle();
            (exec.stats(), exec.audit_log())
        }
        None => (Default::default(), Vec::new()),
    };
    let report = BenchReport {
        cached: opts.cached,
        spec: workload.spec.clone(),
        tool_calls: calls,
        hits,
        hit_rate: if calls == 0 { 0.0 } else { hits as f64 / calls as f64 },
        hit_rate_by_epoch: hits_by_epoch.iter().map(|&(h, n)| if n == 0 { 0.0 } else { h as f64 / n as f64 }).collect(),
        median_tool_ms: percentile(&tool_ms, 0.5),
        p95_tool_ms: percentile(&tool_ms, 0.95),
        mean_tool_ms: mean(&tool_ms),
        rollout_wall_ms,
        batch_wall_ms,
        executed_tools: executed,
        replayed_tools: replayed,
        snapshots_stored: stats.snapshots_stored,
        leases_acquired: stats.leases_acquired,
        leases_released: stats.leases_released,
        results_digest: format!("{:016x}", digest.0),
        p95_get_latency_by_rps: Vec::new(),
    };
    Ok(BenchRun { report, tool_ms, hit, audit })
}

/// Hits a sequential strict-mode run of `workload` must produce per
/// rollout: a call hits iff its whole trajectory was seen earlier in the
/// same task, and a rollout stops hitting at its first miss.
pub fn expected_hits_strict(workload: &Workload) -> Vec<u64> {
    let mut seen: Vec<HashSet<Vec<usize>>> = vec![HashSet::new(); workload.spec.tasks];
    let mut ids: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    workload
        .rollouts
        .iter()
        .map(|r| {
            let keys: Vec<usize> = r.steps.iter().map(|d| {
                let n = ids.len();
                *ids.entry(d.key()).or_insert(n)
            }).collect();
            let hits = (1..=keys.len()).take_while(|&i| seen[r.task].contains(&keys[..i])).count();
            for i in 1..=keys.len() {
                seen[r.task].insert(keys[..i].to_vec());
            }
            hits as u64
        })
        .collect()
}

/// Cached versus uncached, in the shape of a per-call speedup table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub tool_calls: u64,
    pub hit_rate: f64,
    pub median_tool_ms_uncached: f64,
    pub median_tool_ms_cached: f64,
    /// `median_tool_ms_uncached / median_tool_ms_cached`.
    pub speedup: f64,
    pub mean_tool_ms_uncached: f64,
    pub mean_tool_ms_cached: f64,
    /// Fraction of summed rollout time saved.
    pub rollout_savings: f64,
    /// Fraction of summed batch time saved.
    pub batch_savings: f64,
    pub identical_results: bool,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("{0}")]
pub struct CompareError(String);

pub fn compare(a: &BenchReport, b: &BenchReport) -> Result<Comparison, CompareError> {
    let (cached, uncached) = match (a.cached, b.cached) {
        (true, false) => (a, b),
        (false, true) => (b, a),
        _ => return Err(CompareError("need one cached and one uncached report".into())),
    };
    if cached.spec != uncached.spec {
        return Err(CompareError("reports come from different workload specs".into()));
    }
    let savings = |c: &[f64], u: &[f64]| {
        let u: f64 = u.iter().sum();
        if u == 0.0 {
            0.0
        } else {
            1.0 - c.iter().sum::<f64>() / u
        }
    };
    Ok(Comparison {
        tool_calls: cached.tool_calls,
        hit_rate: cached.hit_rate,
        median_tool_ms_uncached: uncached.median_tool_ms,
        median_tool_ms_cached: cached.median_tool_ms,
        speedup: uncached.median_tool_ms / cached.median_tool_ms,
        mean_tool_ms_uncached: uncached.mean_tool_ms,
        mean_tool_ms_cached: cached.mean_tool_ms,
        rollout_savings: savings(&cached.rollout_wall_ms, &uncached.rollout_wall_ms),
        batch_savings: savings(&cached.batch_wall_ms, &uncached.batch_wall_ms),
        identical_results: cached.results_digest == uncached.results_digest,
    })
}

impl Comparison {
    /// Plain-text table: one row per metric, uncached and cached columns.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24}{:>14}{:>14}{:>10}\n", "metric", "uncached", "cached", "speedup"));
        out.push_str(&format!(
            "{:<24}{:>14.3}{:>14.3}{:>9.2}x\n",
            "median tool call (ms)", self.median_tool_ms_uncached, self.median_tool_ms_cached, self.speedup
        ));
        out.push_str(&format!(
            "{:<24}{:>14.3}{:>14.3}{:>9.2}x\n",
            "mean tool call (ms)",
            self.mean_tool_ms_uncached,
            self.mean_tool_ms_cached,
            self.mean_tool_ms_uncached / self.mean_tool_ms_cached
        ));
        out.push_str(&format!("hit rate {:.3}, rollout time saved {:.1}%, batch time saved {:.1}%, identical results: {}\n",
            self.hit_rate, self.rollout_savings * 100.0, self.batch_savings * 100.0, self.identical_results));
        out
    }
}
