use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tvcache_core::cache::{Cache, CacheConfig, MatchMode, ToolCache};
use tvcache_core::executor::{fresh_execution, Decision, Executor};
use tvcache_core::forkpool::{ForkPool, ForkPoolConfig};
use tvcache_core::sandbox::{Backend, FileTreeBackend};
use tvcache_core::snapshot::{CostEstimate, CostModel, SnapshotPolicy, SnapshotStore};
use tvcache_core::tcg::{persist, restore, ToolDescriptor, ToolResult, Trajectory};

fn backend() -> Arc<dyn Backend> {
    Arc::new(FileTreeBackend::default())
}

fn executor(budget: usize, policy: SnapshotPolicy) -> (Executor, Arc<Cache>) {
    let cost = Arc::new(CostModel::default());
    let store = Arc::new(SnapshotStore::in_memory(u64::MAX, cost));
    let pool = Arc::new(ForkPool::new(backend(), store, ForkPoolConfig::default()));
    let cache = Arc::new(Cache::new(CacheConfig { snapshot_budget: budget, ..Default::default() }));
    (Executor::new(cache.clone(), pool, policy), cache)
}

fn step(name: &str, args: serde_json::Value) -> ToolDescriptor {
    FileTreeBackend::default().describe(name, &args).unwrap()
}

#[test]
fn sample_tree_style_rollouts() {
    // Rollout 1: t1 t2 t3 (t3 is expensive and gets a snapshot).
    // Rollout 2 repeats it and adds t4; rollout 3 branches after t2.
    let (exec, cache) = executor(8, SnapshotPolicy::Selective);
    exec.store()
        .cost_model()
        .set_estimate("file_tree", CostEstimate { serialize_ms_ema: 5.0, restore_ms_ema: 5.0 });
    let t1 = step("write", json!({"path": "main.py", "content": "print(1)"}));
    let t2 = step("read", json!({"path": "main.py"}));
    let t3 = step("append", json!({"path": "log", "content": "tests ran", "ms": 25}));
    let t4 = step("read", json!({"path": "log"}));
    let t6 = step("ls", json!({}));

    let mut s = exec.start_rollout("sample", MatchMode::Strict);
    for d in [&t1, &t2, &t3] {
        exec.call_tool(&mut s, d);
    }
    exec.end_rollout(s);
    exec.pool().wait_idle();

    let mut s = exec.start_rollout("sample", MatchMode::Strict);
    let results: Vec<ToolResult> = [&t1, &t2, &t3, &t4].iter().map(|d| exec.call_tool(&mut s, d)).collect();
    assert_eq!(&s.decisions()[..3], &[Decision::Hit, Decision::Hit, Decision::Hit]);
    assert!(matches!(s.decisions()[3], Decision::Forked { snapshot_depth: 3, replayed: 0, .. }));
    assert_eq!(results[3].payload, b"tests ran");
    let report = exec.end_rollout(s);
    assert_eq!(report.executed_tools, 1);

    let mut s = exec.start_rollout("sample", MatchMode::Strict);
    exec.call_tool(&mut s, &t1);
    exec.call_tool(&mut s, &t2);
    let r = exec.call_tool(&mut s, &t6);
    assert_eq!(r.payload, b"main.py");
    exec.end_rollout(s);

    let g = cache.graph("sample").unwrap();
    let g = g.read();
    assert_eq!(g.node_count(), 1 + 5);
    assert_eq!(g.snapshot_count(), 1);
    assert_eq!(g.active_leases(), 0);
}

#[test]
fn random_rollout_sets_match_fresh_execution() {
    let (exec, cache) = executor(6, SnapshotPolicy::Always);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = FileTreeBackend::default();
    for set in 0..25 {
        let task = format!("task-{}", set % 4);
        let spine: Vec<ToolDescriptor> = (0..10).map(|_| b.sample_descriptor(&mut rng)).collect();
        for _ in 0..8 {
            let keep = rng.gen_range(1..=spine.len());
            let mut steps = spine[..keep].to_vec();
            steps.extend((0..rng.gen_range(0..3)).map(|_| b.sample_descriptor(&mut rng)));
            let mode = if rng.gen_bool(0.5) { MatchMode::Strict } else { MatchMode::StatefulSkip };
            let mut s = exec.start_rollout(format!("{task}-{mode:?}"), mode);
            let got: Vec<ToolResult> = steps.iter().map(|d| exec.call_tool(&mut s, d)).collect();
            exec.end_rollout(s);
            let oracle = fresh_execution(&b, &Trajectory::new(steps.clone()));
            for (a, o) in got.iter().zip(&oracle) {
                assert!(a.same_value(o), "{steps:?}");
            }
        }
    }
    exec.pool().wait_idle();
    let mut live = HashSet::new();
    for task in cache.task_ids() {
        let g = cache.graph(&task).unwrap();
        let g = g.read();
        assert!(g.snapshot_count() <= 6);
        live.extend(g.nodes().filter_map(|n| n.snapshot().map(|s| s.snapshot_id.clone())));
    }
    assert_eq!(exec.store().len(), live.len());
    let s = exec.stats();
    assert_eq!(s.leases_acquired, s.leases_released);
}

#[test]
fn restored_graph_serves_the_same_hits() {
    let (exec, cache) = executor(8, SnapshotPolicy::Never);
    let steps = [
        step("write", json!({"path": "a", "content": "1"})),
        step("read", json!({"path": "a"})),
        step("append", json!({"path": "a", "content": "2"})),
        step("read", json!({"path": "a"})),
    ];
    let mut s = exec.start_rollout("p", MatchMode::Strict);
    let first: Vec<ToolResult> = steps.iter().map(|d| exec.call_tool(&mut s, d)).collect();
    exec.end_rollout(s);

    let mut bytes = Vec::new();
    persist(&cache.graph("p").unwrap().read(), &mut bytes).unwrap();
    let fresh = Cache::default();
    fresh.install(restore(bytes.as_slice()).unwrap());
    for i in 1..=steps.len() {
        let q = Trajectory::new(steps[..i].to_vec());
        let got = fresh.get("p", &q, MatchMode::Strict).unwrap().expect("restored hit");
        assert_eq!(got, first[i - 1]);
    }
}
