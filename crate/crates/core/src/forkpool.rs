//! Sandbox supply: warm roots, prewarmed forks of snapshot nodes, reactive
//! forks and a FIFO rate limiter over every backend start/restore/fork.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::sandbox::{Backend, SandboxError, SandboxHandle};
use crate::snapshot::{SnapshotError, SnapshotRef, SnapshotStore};
use crate::tcg::NodeId;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ForkPoolConfig {
    /// Warm root target, typically batch size times rollouts per task.
    pub root_pool_size: usize,
    pub max_concurrent_forks: usize,
    pub prewarm_enabled: bool,
    /// Per-task cap on prewarmed plus in-progress prewarms.
    pub prewarm_budget: usize,
    /// Attempts per background job before giving up.
    pub retry_cap: u32,
    pub workers: usize,
}

impl Default for ForkPoolConfig {
    fn default() -> Self {
        Self { root_pool_size: 0, max_concurrent_forks: 4, prewarm_enabled: true, prewarm_budget: 64, retry_cap: 2, workers: 4 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("snapshot missing: {0}")]
    SnapshotMissing(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Snapshot(SnapshotError),
}

impl From<SnapshotError> for PoolError {
    fn from(e: SnapshotError) -> Self {
        match e {
            SnapshotError::UnknownRef(id) => PoolError::SnapshotMissing(id),
            other => PoolError::Snapshot(other),
        }
    }
}

/// Counting semaphore that admits waiters in arrival order and records the
/// peak number of holders.
pub struct FifoSemaphore {
    permits: usize,
    state: Mutex<SemState>,
    cv: Condvar,
    high_water: AtomicUsize,
}

struct SemState {
    next_ticket: u64,
    serving: u64,
    in_use: usize,
}

pub struct Permit<'a> {
    sem: &'a FifoSemaphore,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.sem.state.lock();
        s.in_use -= 1;
        drop(s);
        self.sem.cv.notify_all();
    }
}

impl FifoSemaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: permits.max(1),
            state: Mutex::new(SemState { next_ticket: 0, serving: 0, in_use: 0 }),
            cv: Condvar::new(),
            high_water: AtomicUsize::new(0),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut s = self.state.lock();
        let ticket = s.next_ticket;
        s.next_ticket += 1;
        while s.serving != ticket || s.in_use >= self.permits {
            self.cv.wait(&mut s);
        }
        s.serving += 1;
        s.in_use += 1;
        self.high_water.fetch_max(s.in_use, Ordering::Relaxed);
        drop(s);
        // The next ticket holder may also be admissible.
        self.cv.notify_all();
        Permit { sem: self }
    }

    pub fn in_use(&self) -> usize {
        self.state.lock().in_use
    }

    pub fn high_water(&self) -> usize {
        self.high_water.load(Ordering::Relaxed)
    }

    pub fn permits(&self) -> usize {
        self.permits
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub warm_root_count: usize,
    pub prewarmed_count: usize,
    pub in_flight_forks: usize,
    pub max_in_flight_forks: usize,
    pub proactive_hits: u64,
    pub reactive_forks: u64,
    pub background_instantiations: u64,
    pub warm_root_hits: u64,
    pub cold_root_starts: u64,
    pub failed_jobs: u64,
    pub discarded_prewarms: u64,
}

type Key = (String, NodeId);

struct Prewarmed {
    snapshot_id: String,
    handle: SandboxHandle,
}

enum Job {
    StartRoot,
    Restore { key: Key, snapshot: SnapshotRef, background: bool },
    Shutdown,
}

#[derive(Default)]
struct Counters {
    proactive_hits: AtomicU64,
    reactive_forks: AtomicU64,
    background_instantiations: AtomicU64,
    warm_root_hits: AtomicU64,
    cold_root_starts: AtomicU64,
    failed_jobs: AtomicU64,
    discarded_prewarms: AtomicU64,
}

struct Inner {
    backend: Arc<dyn Backend>,
    store: Arc<SnapshotStore>,
    config: ForkPoolConfig,
    limiter: FifoSemaphore,
    warm: Mutex<VecDeque<SandboxHandle>>,
    roots_requested: AtomicUsize,
    prewarmed: Mutex<HashMap<Key, Prewarmed>>,
    pending: Mutex<HashSet<Key>>,
    tombstones: Mutex<HashSet<String>>,
    outstanding: Mutex<usize>,
    idle: Condvar,
    counters: Counters,
    tx: Sender<Job>,
}

/// Supplies sandboxes to rollouts. Background work runs on a fixed set of
/// worker threads; all backend lifecycle calls pass through the limiter.
pub struct ForkPool {
    inner: Arc<Inner>,
    workers: Vec<JoinHandle<()>>,
    shut: AtomicBool,
}

impl ForkPool {
    pub fn new(backend: Arc<dyn Backend>, store: Arc<SnapshotStore>, config: ForkPoolConfig) -> Self {
        let (tx, rx) = crossbeam_channel::unbounded();
        let inner = Arc::new(Inner {
            backend,
            store,
            limiter: FifoSemaphore::new(config.max_concurrent_forks),
            warm: Mutex::new(VecDeque::new()),
            roots_requested: AtomicUsize::new(0),
            prewarmed: Mutex::new(HashMap::new()),
            pending: Mutex::new(HashSet::new()),
            tombstones: Mutex::new(HashSet::new()),
            outstanding: Mutex::new(0),
            idle: Condvar::new(),
            counters: Counters::default(),
            tx,
            config,
        });
        let workers = (0..inner.config.workers.max(1))
            .map(|i| {
                let inner = inner.clone();
                let rx: Receiver<Job> = rx.clone();
                std::thread::Builder::new()
                    .name(format!("forkpool-{i}"))
                    .spawn(move || worker(inner, rx))
                    .expect("spawn fork pool worker")
            })
            .collect();
        Self { inner, workers, shut: AtomicBool::new(false) }
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.inner.backend
    }

    pub fn store(&self) -> &Arc<SnapshotStore> {
        &self.inner.store
    }

    pub fn config(&self) -> &ForkPoolConfig {
        &self.inner.config
    }

    pub fn limiter(&self) -> &FifoSemaphore {
        &self.inner.limiter
    }

    /// Fills the warm queue to at least `count` ready roots and waits for it.
    pub fn warm_roots(&self, count: usize) {
        let have = self.inner.warm.lock().len() + self.inner.roots_requested.load(Ordering::SeqCst);
        for _ in have..count {
            self.inner.submit(Job::StartRoot);
        }
        self.wait_idle();
    }

    /// A clean root: a warm one if available, else started synchronously.
    pub fn acquire_root(&self) -> Result<SandboxHandle, PoolError> {
        let warm = self.inner.warm.lock().pop_front();
        self.inner.replenish();
        match warm {
            Some(h) => {
                self.inner.counters.warm_root_hits.fetch_add(1, Ordering::Relaxed);
                Ok(h)
            }
            None => {
                self.inner.counters.cold_root_starts.fetch_add(1, Ordering::Relaxed);
                let _permit = self.inner.limiter.acquire();
                Ok(self.inner.backend.start()?)
            }
        }
    }

    /// Schedules a restore of `snapshot` to be kept ready for `node`.
    pub fn prewarm_for_node(&self, task_id: &str, node: NodeId, snapshot: &SnapshotRef) {
        self.inner.schedule_restore((task_id.to_string(), node), snapshot, false);
    }

    /// Same as [`prewarm_for_node`](Self::prewarm_for_node) for a snapshot
    /// that was just stored; counted separately.
    pub fn background_instantiate(&self, task_id: &str, node: NodeId, snapshot: &SnapshotRef) {
        self.inner.schedule_restore((task_id.to_string(), node), snapshot, true);
    }

    /// A sandbox in the state of `snapshot`, which belongs to `node`. The
    /// caller must hold a lease on the node.
    pub fn acquire_for_node(&self, task_id: &str, node: NodeId, snapshot: &SnapshotRef) -> Result<SandboxHandle, PoolError> {
        let key = (task_id.to_string(), node);
        let ready = {
            let mut map = self.inner.prewarmed.lock();
            match map.remove(&key) {
                Some(p) if p.snapshot_id == snapshot.snapshot_id => Some(p.handle),
                Some(mut stale) => {
                    self.inner.backend.stop(&mut stale.handle);
                    None
                }
                None => None,
            }
        };
        let handle = match ready {
            Some(h) => {
                self.inner.counters.proactive_hits.fetch_add(1, Ordering::Relaxed);
                h
            }
            None => {
                self.inner.counters.reactive_forks.fetch_add(1, Ordering::Relaxed);
                self.inner.restore(snapshot)?
            }
        };
        self.inner.schedule_restore(key, snapshot, false);
        Ok(handle)
    }

    /// Hands over a live sandbox whose state equals `snapshot`, to serve as
    /// the prewarmed copy for `node`. Stopped instead when not needed.
    pub fn offer_prewarmed(&self, task_id: &str, node: NodeId, snapshot: &SnapshotRef, mut handle: SandboxHandle) {
        let key = (task_id.to_string(), node);
        if !self.inner.config.prewarm_enabled || self.inner.tombstones.lock().contains(&snapshot.snapshot_id) {
            self.inner.backend.stop(&mut handle);
            return;
        }
        let mut map = self.inner.prewarmed.lock();
        let within_budget = self.inner.task_load(&map, task_id) < self.inner.config.prewarm_budget;
        if map.contains_key(&key) || !within_budget {
            drop(map);
            self.inner.backend.stop(&mut handle);
            return;
        }
        map.insert(key, Prewarmed { snapshot_id: snapshot.snapshot_id.clone(), handle });
    }

    /// Drops any prewarmed copy of an evicted snapshot and prevents
    /// in-flight prewarms of it from registering.
    pub fn discard(&self, task_id: &str, node: NodeId, snapshot_id: &str) {
        self.inner.tombstones.lock().insert(snapshot_id.to_string());
        let removed = {
            let mut map = self.inner.prewarmed.lock();
            let key = (task_id.to_string(), node);
            match map.get(&key) {
                Some(p) if p.snapshot_id == snapshot_id => map.remove(&key),
                _ => None,
            }
        };
        if let Some(mut p) = removed {
            self.inner.counters.discarded_prewarms.fetch_add(1, Ordering::Relaxed);
            self.inner.backend.stop(&mut p.handle);
        }
    }

    pub fn has_prewarmed(&self, task_id: &str, node: NodeId) -> bool {
        self.inner.prewarmed.lock().contains_key(&(task_id.to_string(), node))
    }

    /// Blocks until no background job is queued or running.
    pub fn wait_idle(&self) {
        let mut n = self.inner.outstanding.lock();
        while *n > 0 {
            self.inner.idle.wait(&mut n);
        }
    }

    /// Like [`wait_idle`](Self::wait_idle) with a deadline; false on timeout.
    pub fn wait_idle_for(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut n = self.inner.outstanding.lock();
        while *n > 0 {
            if self.inner.idle.wait_until(&mut n, deadline).timed_out() {
                return *n == 0;
            }
        }
        true
    }

    pub fn stats(&self) -> PoolStats {
        let c = &self.inner.counters;
        PoolStats {
            warm_root_count: self.inner.warm.lock().len(),
            prewarmed_count: self.inner.prewarmed.lock().len(),
            in_flight_forks: self.inner.limiter.in_use(),
            max_in_flight_forks: self.inner.limiter.high_water(),
            proactive_hits: c.proactive_hits.load(Ordering::Relaxed),
            reactive_forks: c.reactive_forks.load(Ordering::Relaxed),
            background_instantiations: c.background_instantiations.load(Ordering::Relaxed),
            warm_root_hits: c.warm_root_hits.load(Ordering::Relaxed),
            cold_root_starts: c.cold_root_starts.load(Ordering::Relaxed),
            failed_jobs: c.failed_jobs.load(Ordering::Relaxed),
            discarded_prewarms: c.discarded_prewarms.load(Ordering::Relaxed),
        }
    }

    /// Stops workers and every sandbox the pool still owns.
    pub fn shutdown(&mut self) {
        if self.shut.swap(true, Ordering::SeqCst) {
            return;
        }
        for _ in &self.workers {
            let _ = self.inner.tx.send(Job::Shutdown);
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        for mut h in self.inner.warm.lock().drain(..) {
            self.inner.backend.stop(&mut h);
        }
        for (_, mut p) in self.inner.prewarmed.lock().drain() {
            self.inner.backend.stop(&mut p.handle);
        }
    }
}

impl Drop for ForkPool {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Inner {
    fn submit(&self, job: Job) {
        if matches!(job, Job::StartRoot) {
            self.roots_requested.fetch_add(1, Ordering::SeqCst);
        }
        *self.outstanding.lock() += 1;
        if self.tx.send(job).is_err() {
            self.finish_job();
        }
    }

    fn finish_job(&self) {
        let mut n = self.outstanding.lock();
        *n -= 1;
        if *n == 0 {
            self.idle.notify_all();
        }
    }

    /// Tops the warm queue back up to target once it falls below half.
    fn replenish(&self) {
        let target = self.config.root_pool_size;
        let have = self.warm.lock().len() + self.roots_requested.load(Ordering::SeqCst);
        if target == 0 || have * 2 >= target {
            return;
        }
        for _ in have..target {
            self.submit(Job::StartRoot);
        }
    }

    fn task_load(&self, prewarmed: &HashMap<Key, Prewarmed>, task_id: &str) -> usize {
        let pending = self.pending.lock();
        prewarmed.keys().filter(|k| k.0 == task_id).count() + pending.iter().filter(|k| k.0 == task_id).count()
    }

    fn schedule_restore(&self, key: Key, snapshot: &SnapshotRef, background: bool) {
        if !self.config.prewarm_enabled || self.tombstones.lock().contains(&snapshot.snapshot_id) {
            return;
        }
        {
            let map = self.prewarmed.lock();
            if map.contains_key(&key) || self.task_load(&map, &key.0) >= self.config.prewarm_budget {
                return;
            }
            if !self.pending.lock().insert(key.clone()) {
                return;
            }
        }
        self.submit(Job::Restore { key, snapshot: snapshot.clone(), background });
    }

    fn restore(&self, snapshot: &SnapshotRef) -> Result<SandboxHandle, PoolError> {
        let bytes = self.store.load(snapshot)?;
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let handle = self.backend.restore(&bytes)?;
        let ms = started.elapsed().as_secs_f64() * 1000.0;
        self.store.cost_model().observe_restore(&snapshot.backend_kind, ms);
        Ok(handle)
    }

    fn run_restore_job(&self, key: Key, snapshot: SnapshotRef, background: bool) {
        let mut result = Err(PoolError::SnapshotMissing(snapshot.snapshot_id.clone()));
        for attempt in 0..self.config.retry_cap.max(1) {
            if self.tombstones.lock().contains(&snapshot.snapshot_id) {
                break;
            }
            result = self.restore(&snapshot);
            match &result {
                Ok(_) | Err(PoolError::SnapshotMissing(_)) => break,
                Err(e) => tracing::warn!(task = %key.0, node = %key.1, attempt, error = %e, "prewarm failed"),
            }
        }
        let mut map = self.prewarmed.lock();
        self.pending.lock().remove(&key);
        match result {
            Ok(mut handle) => {
                // Evicted while restoring, or already supplied by another path.
                if self.tombstones.lock().contains(&snapshot.snapshot_id) || map.contains_key(&key) {
                    drop(map);
                    self.counters.discarded_prewarms.fetch_add(1, Ordering::Relaxed);
                    self.backend.stop(&mut handle);
                    return;
                }
                map.insert(key, Prewarmed { snapshot_id: snapshot.snapshot_id, handle });
                if background {
                    self.counters.background_instantiations.fetch_add(1, Ordering::Relaxed);
                }
            }
            Err(e) => {
                self.counters.failed_jobs.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(task = %key.0, node = %key.1, error = %e, "giving up on prewarm");
            }
        }
    }

    fn run_start_root(&self) {
        for attempt in 0..self.config.retry_cap.max(1) {
            let started = {
                let _permit = self.limiter.acquire();
                self.backend.start()
            };
            match started {
                Ok(h) => {
                    self.warm.lock().push_back(h);
                    return;
                }
                Err(e) => tracing::warn!(attempt, error = %e, "root start failed"),
            }
        }
        self.counters.failed_jobs.fetch_add(1, Ordering::Relaxed);
    }
}

fn worker(inner: Arc<Inner>, rx: Receiver<Job>) {
    while let Ok(job) = rx.recv() {
        match job {
            Job::Shutdown => return,
            Job::StartRoot => {
                inner.run_start_root();
                inner.roots_requested.fetch_sub(1, Ordering::SeqCst);
            }
            Job::Restore { key, snapshot, background } => inner.run_restore_job(key, snapshot, background),
        }
        inner.finish_job();
    }
}
