//! Golden traces: the exact sequence of wire requests and responses the
//! reference executor issues, one JSON object per line:
//! `{"case", "step", "endpoint", "request", "response"}`.
//!
//! Each `call_tool` invocation is recorded first as a pseudo-endpoint
//! `call_tool` whose request holds the call and whose response holds the
//! returned result and the executor's decision; the cache requests it made
//! follow with increasing `step`.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use tvcache_core::cache::{Cache, CacheConfig, CacheError, EvictedSnapshot, MatchMode, PutOutcome, ToolCache};
use tvcache_core::executor::Executor;
use tvcache_core::forkpool::{ForkPool, ForkPoolConfig};
use tvcache_core::sandbox::{Backend, FileTreeBackend};
use tvcache_core::snapshot::{CostModel, SnapshotPolicy, SnapshotRef, SnapshotStore};
use tvcache_core::tcg::{LeaseId, PrefixMatch, ToolDescriptor, ToolResult, Trajectory};

use crate::wire::{GetResponse, LookupRequest, PrefixMatchResponse, PutRequest, PutResponse, ReleaseRequest, ReleaseResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenRecord {
    pub case: usize,
    pub step: usize,
    pub endpoint: String,
    pub request: Value,
    pub response: Value,
}

/// Wraps a cache and records every call in wire form.
pub struct RecordingCache<C> {
    inner: C,
    case: AtomicUsize,
    step: AtomicUsize,
    records: Mutex<Vec<GoldenRecord>>,
}

fn error_value(e: &CacheError) -> Value {
    json!({"error": e.to_string()})
}

impl<C: ToolCache> RecordingCache<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, case: AtomicUsize::new(0), step: AtomicUsize::new(0), records: Mutex::new(Vec::new()) }
    }

    pub fn begin_case(&self, case: usize) {
        self.case.store(case, Ordering::SeqCst);
        self.step.store(0, Ordering::SeqCst);
    }

    pub fn record(&self, endpoint: &str, request: Value, response: Value) {
        let step = self.step.fetch_add(1, Ordering::SeqCst);
        self.records.lock().push(GoldenRecord {
            case: self.case.load(Ordering::SeqCst),
            step,
            endpoint: endpoint.to_string(),
            request,
            response,
        });
    }

    pub fn take_records(&self) -> Vec<GoldenRecord> {
        std::mem::take(&mut *self.records.lock())
    }
}

fn lookup_request(task_id: &str, q: &Trajectory, mode: MatchMode) -> Value {
    serde_json::to_value(LookupRequest { task_id: task_id.into(), trajectory: q.steps().to_vec(), mode }).expect("serializes")
}

impl<C: ToolCache> ToolCache for RecordingCache<C> {
    fn get(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<Option<ToolResult>, CacheError> {
        let r = self.inner.get(task_id, q, mode);
        let resp = match &r {
            Ok(result) => {
                let result = result.clone().map(|mut r| {
                    r.exec_ms = 0.0;
                    r
                });
                serde_json::to_value(GetResponse { hit: result.is_some(), result }).expect("serializes")
            }
            Err(e) => error_value(e),
        };
        self.record("get", lookup_request(task_id, q, mode), resp);
        r
    }

    fn prefix_match(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<PrefixMatch, CacheError> {
        let r = self.inner.prefix_match(task_id, q, mode);
        let resp = match &r {
            Ok(m) => {
                let mut w = PrefixMatchResponse::from(m.clone());
                // Lease ids and snapshot ids are random; traces compare shape.
                w.lease_id = w.lease_id.map(|_| LeaseId("<lease>".into()));
                w.snapshot = None;
                w.snapshot_id = w.snapshot_id.map(|_| "<snapshot>".into());
                serde_json::to_value(w).expect("serializes")
            }
            Err(e) => error_value(e),
        };
        self.record("prefix_match", lookup_request(task_id, q, mode), resp);
        r
    }

    fn put(
        &self,
        task_id: &str,
        q: &Trajectory,
        result: &ToolResult,
        snapshot: Option<&SnapshotRef>,
        mode: MatchMode,
    ) -> Result<PutOutcome, CacheError> {
        let r = self.inner.put(task_id, q, result, snapshot, mode);
        // Timings vary run to run; traces keep values only.
        let mut stable = result.clone();
        stable.exec_ms = 0.0;
        let req = PutRequest {
            task_id: task_id.into(),
            trajectory: q.steps().to_vec(),
            result: stable,
            snapshot: None,
            snapshot_id: snapshot.map(|_| "<snapshot>".into()),
            mode,
        };
        let resp = match &r {
            Ok(o) => serde_json::to_value(PutResponse {
                node_id: o.node_id,
                created: o.created,
                snapshot_adopted: o.snapshot_adopted,
                evicted: Vec::new(),
            })
            .map(|mut v| {
                v["evicted"] = json!(o.evicted.iter().map(|e| e.node_id).collect::<Vec<_>>());
                v
            })
            .expect("serializes"),
            Err(e) => error_value(e),
        };
        self.record("put", serde_json::to_value(req).expect("serializes"), resp);
        r
    }

    fn release(&self, task_id: &str, lease: &LeaseId) -> Result<Vec<EvictedSnapshot>, CacheError> {
        let r = self.inner.release(task_id, lease);
        let req = ReleaseRequest { task_id: task_id.into(), lease_id: LeaseId("<lease>".into()) };
        let resp = match &r {
            Ok(ev) => {
                let mut v = serde_json::to_value(ReleaseResponse { released: true, evicted: Vec::new() }).expect("serializes");
                v["evicted"] = json!(ev.iter().map(|e| e.node_id).collect::<Vec<_>>());
                v
            }
            Err(e) => error_value(e),
        };
        self.record("release", serde_json::to_value(req).expect("serializes"), resp);
        r
    }
}

/// Runs `cases` seeded rollouts through the reference executor over an
/// in-process cache and file tree sandboxes, recording the trace. The
/// snapshot policy is `Always` so every path (hit, fork and replay, root)
/// appears.
pub fn generate(cases: usize, seed: u64) -> Vec<GoldenRecord> {
    let backend: Arc<dyn Backend> = Arc::new(FileTreeBackend::default());
    let store = Arc::new(SnapshotStore::in_memory(u64::MAX, Arc::new(CostModel::default())));
    let pool = Arc::new(ForkPool::new(backend.clone(), store, ForkPoolConfig { prewarm_enabled: false, ..Default::default() }));
    let recorder = Arc::new(RecordingCache::new(Cache::new(CacheConfig { snapshot_budget: 4, ..Default::default() })));
    let exec = Executor::new(recorder.clone(), pool, SnapshotPolicy::Always);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spines: Vec<Vec<ToolDescriptor>> =
        (0..4).map(|_| (0..8).map(|_| backend.sample_descriptor(&mut rng)).collect()).collect();
    let mut call_records = Vec::new();
    for case in 0..cases {
        recorder.begin_case(case);
        let task = case % spines.len();
        let mode = if rng.gen_bool(0.3) { MatchMode::StatefulSkip } else { MatchMode::Strict };
        let keep = rng.gen_range(1..=spines[task].len());
        let mut steps = spines[task][..keep].to_vec();
        steps.extend((0..rng.gen_range(0..3)).map(|_| backend.sample_descriptor(&mut rng)));
        let task_id = format!("golden-{task}");
        let mut session = exec.start_rollout(task_id.clone(), mode);
        for d in &steps {
            let history = session.history().steps().to_vec();
            let mark = recorder.records.lock().len();
            let mut result = exec.call_tool(&mut session, d);
            result.exec_ms = 0.0;
            let decision = session.decisions().last().cloned();
            call_records.push((
                mark,
                GoldenRecord {
                    case,
                    step: 0,
                    endpoint: "call_tool".into(),
                    request: json!({"task_id": task_id, "mode": mode, "history": history, "descriptor": d}),
                    response: json!({"result": result, "decision": decision}),
                },
            ));
        }
        exec.end_rollout(session);
    }
    let cache_records = recorder.take_records();
    // Interleave each call record ahead of the cache requests it caused and
    // renumber steps within each case.
    let mut out = Vec::with_capacity(cache_records.len() + call_records.len());
    let mut calls = call_records.into_iter().peekable();
    for (i, r) in cache_records.into_iter().enumerate() {
        while calls.peek().is_some_and(|(mark, _)| *mark == i) {
            out.push(calls.next().expect("peeked").1);
        }
        out.push(r);
    }
    out.extend(calls.map(|(_, r)| r));
    let mut step = 0;
    let mut case = usize::MAX;
    for r in &mut out {
        if r.case != case {
            case = r.case;
            step = 0;
        }
        r.step = step;
        step += 1;
    }
    out
}

pub fn write_jsonl(records: &[GoldenRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> std::io::Result<Vec<GoldenRecord>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_covers_every_path() {
        let a = generate(200, 1);
        let b = generate(200, 1);
        if let Some(i) = (0..a.len().min(b.len())).find(|&i| a[i] != b[i]) {
            panic!("records differ at {i}:\n{:?}\n{:?}", a[i], b[i]);
        }
        assert_eq!(a.len(), b.len());
        assert_eq!(a.iter().map(|r| r.case).max(), Some(199));
        let decisions: Vec<&str> = a
            .iter()
            .filter(|r| r.endpoint == "call_tool")
            .filter_map(|r| r.response["decision"]["path"].as_str())
            .collect();
        for path in ["hit", "forked", "root", "diverged"] {
            assert!(decisions.contains(&path), "no {path} decision in golden trace");
        }
        let acquired = a.iter().filter(|r| r.endpoint == "prefix_match" && r.response["lease_id"].is_string()).count();
        let released = a.iter().filter(|r| r.endpoint == "release").count();
        assert_eq!(acquired, released);
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = generate(5, 2);
        let mut buf = Vec::new();
        write_jsonl(&recs, &mut buf).unwrap();
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn calls_precede_their_requests() {
        let recs = generate(20, 3);
        for case in 0..20 {
            let first = recs.iter().find(|r| r.case == case).unwrap();
            assert_eq!(first.endpoint, "call_tool");
            assert_eq!(first.step, 0);
        }
    }
}
