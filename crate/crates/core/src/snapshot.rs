//! Snapshot cost model and storage.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::tcg::unix_micros;

/// Handle to one stored sandbox snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRef {
    pub snapshot_id: String,
    pub size_bytes: u64,
    pub serialize_ms: f64,
    pub created_at: u64,
    pub backend_kind: String,
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("unknown snapshot {0}")]
    UnknownRef(String),
    #[error("snapshot storage full: {used} of {cap} bytes used, {needed} more requested")]
    StorageFull { needed: u64, used: u64, cap: u64 },
    #[error("invalid backend kind {0:?}")]
    InvalidKind(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_COST_MS: f64 = 1000.0;
pub const DEFAULT_EMA_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub serialize_ms_ema: f64,
    pub restore_ms_ema: f64,
}

impl CostEstimate {
    pub fn overhead_ms(&self) -> f64 {
        self.serialize_ms_ema + self.restore_ms_ema
    }
}

/// Per-backend moving averages of serialize and restore cost.
#[derive(Debug)]
pub struct CostModel {
    alpha: f64,
    cold_start_ms: f64,
    estimates: Mutex<HashMap<String, CostEstimate>>,
}

impl Default for CostModel {
    fn default() -> Self {
        Self::new(DEFAULT_EMA_ALPHA, DEFAULT_COST_MS)
    }
}

impl CostModel {
    /// `alpha` is clamped into (0, 1].
    pub fn new(alpha: f64, cold_start_ms: f64) -> Self {
        let alpha = if alpha.is_finite() && alpha > 0.0 { alpha.min(1.0) } else { DEFAULT_EMA_ALPHA };
        Self { alpha, cold_start_ms: cold_start_ms.max(0.0), estimates: Mutex::new(HashMap::new()) }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn estimate(&self, backend_kind: &str) -> CostEstimate {
        self.estimates.lock().get(backend_kind).copied().unwrap_or(CostEstimate {
            serialize_ms_ema: self.cold_start_ms,
            restore_ms_ema: self.cold_start_ms,
        })
    }

    /// Seeds both estimates for a backend, e.g. from a calibration run.
    pub fn set_estimate(&self, backend_kind: &str, estimate: CostEstimate) {
        self.estimates.lock().insert(backend_kind.to_string(), estimate);
    }

    fn update(&self, backend_kind: &str, ms: f64, field: fn(&mut CostEstimate) -> &mut f64) {
        let ms = ms.max(0.0);
        let mut map = self.estimates.lock();
        let cold = self.cold_start_ms;
        let entry = map
            .entry(backend_kind.to_string())
            .or_insert(CostEstimate { serialize_ms_ema: cold, restore_ms_ema: cold });
        let ema = field(entry);
        *ema = (1.0 - self.alpha) * *ema + self.alpha * ms;
    }

    pub fn observe_serialize(&self, backend_kind: &str, ms: f64) {
        self.update(backend_kind, ms, |e| &mut e.serialize_ms_ema);
    }

    pub fn observe_restore(&self, backend_kind: &str, ms: f64) {
        self.update(backend_kind, ms, |e| &mut e.restore_ms_ema);
    }

    pub fn should_snapshot(&self, exec_ms: f64, backend_kind: &str) -> bool {
        should_snapshot(exec_ms, &self.estimate(backend_kind))
    }
}

/// True iff the tool took strictly longer than serializing plus restoring.
pub fn should_snapshot(exec_ms: f64, estimate: &CostEstimate) -> bool {
    exec_ms > estimate.overhead_ms()
}

/// How the executor decides whether to keep a snapshot after a tool call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotPolicy {
    /// Cost-model comparison.
    #[default]
    Selective,
    Always,
    Never,
}

impl SnapshotPolicy {
    pub fn decide(self, exec_ms: f64, estimate: &CostEstimate) -> bool {
        match self {
            SnapshotPolicy::Selective => should_snapshot(exec_ms, estimate),
            SnapshotPolicy::Always => true,
            SnapshotPolicy::Never => false,
        }
    }
}

enum Backing {
    Memory(HashMap<String, Vec<u8>>),
    Disk { root: PathBuf },
}

struct StoreInner {
    index: HashMap<String, SnapshotRef>,
    used_bytes: u64,
    backing: Backing,
}

/// Byte-capped snapshot storage, either in memory or under a directory as
/// `<root>/<backend_kind>/<snapshot_id>.bin` with an `index.jsonl` log.
pub struct SnapshotStore {
    cap_bytes: u64,
    cost: std::sync::Arc<CostModel>,
    inner: Mutex<StoreInner>,
}

impl std::fmt::Debug for SnapshotStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock();
        f.debug_struct("SnapshotStore")
            .field("cap_bytes", &self.cap_bytes)
            .field("used_bytes", &inner.used_bytes)
            .field("snapshots", &inner.index.len())
            .finish()
    }
}

const INDEX_FILE: &str = "index.jsonl";

impl SnapshotStore {
    pub fn in_memory(cap_bytes: u64, cost: std::sync::Arc<CostModel>) -> Self {
        Self {
            cap_bytes,
            cost,
            inner: Mutex::new(StoreInner { index: HashMap::new(), used_bytes: 0, backing: Backing::Memory(HashMap::new()) }),
        }
    }

    /// Opens or creates an on-disk store. Index entries whose file is gone
    /// are dropped and the index is rewritten compacted.
    pub fn open(root: impl AsRef<Path>, cap_bytes: u64, cost: std::sync::Arc<CostModel>) -> Result<Self, SnapshotError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut index = HashMap::new();
        let index_path = root.join(INDEX_FILE);
        if index_path.exists() {
            for line in BufReader::new(File::open(&index_path)?).lines() {
                let line = line?;
                let Ok(r) = serde_json::from_str::<SnapshotRef>(&line) else {
                    tracing::warn!(line = %line, "skipping unreadable snapshot index line");
                    continue;
                };
                let path = blob_path(&root, &r);
                if fs::metadata(&path).map(|m| m.len() == r.size_bytes).unwrap_or(false) {
                    index.insert(r.snapshot_id.clone(), r);
                }
            }
        }
        let mut refs: Vec<&SnapshotRef> = index.values().collect();
        refs.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.snapshot_id.cmp(&b.snapshot_id)));
        let tmp = root.join("index.jsonl.tmp");
        {
            let mut f = File::create(&tmp)?;
            for r in refs {
                writeln!(f, "{}", serde_json::to_string(r).expect("ref serializes"))?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, &index_path)?;
        let used_bytes = index.values().map(|r| r.size_bytes).sum();
        Ok(Self { cap_bytes, cost, inner: Mutex::new(StoreInner { index, used_bytes, backing: Backing::Disk { root } }) })
    }

    pub fn cost_model(&self) -> &std::sync::Arc<CostModel> {
        &self.cost
    }

    pub fn cap_bytes(&self) -> u64 {
        self.cap_bytes
    }

    pub fn used_bytes(&self) -> u64 {
        self.inner.lock().used_bytes
    }

    pub fn len(&self) -> usize {
        self.inner.lock().index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, snapshot_id: &str) -> bool {
        self.inner.lock().index.contains_key(snapshot_id)
    }

    /// Stores `bytes` captured from a `backend_kind` sandbox in
    /// `serialize_ms`, and feeds that measurement to the cost model.
    pub fn store(&self, bytes: &[u8], backend_kind: &str, serialize_ms: f64) -> Result<SnapshotRef, SnapshotError> {
        if backend_kind.is_empty() || backend_kind.contains(['/', '\\']) || backend_kind.starts_with('.') {
            return Err(SnapshotError::InvalidKind(backend_kind.to_string()));
        }
        let size = bytes.len() as u64;
        let r = SnapshotRef {
            snapshot_id: uuid::Uuid::new_v4().simple().to_string(),
            size_bytes: size,
            serialize_ms: serialize_ms.max(0.0),
            created_at: unix_micros(),
            backend_kind: backend_kind.to_string(),
        };
        let mut inner = self.inner.lock();
        if inner.used_bytes + size > self.cap_bytes {
            return Err(SnapshotError::StorageFull { needed: size, used: inner.used_bytes, cap: self.cap_bytes });
        }
        match &mut inner.backing {
            Backing::Memory(blobs) => {
                blobs.insert(r.snapshot_id.clone(), bytes.to_vec());
            }
            Backing::Disk { root } => {
                let path = blob_path(root, &r);
                fs::create_dir_all(path.parent().expect("blob path has parent"))?;
                let tmp = path.with_extension("part");
                fs::write(&tmp, bytes)?;
                fs::rename(&tmp, &path)?;
                let mut index = OpenOptions::new().create(true).append(true).open(root.join(INDEX_FILE))?;
                writeln!(index, "{}", serde_json::to_string(&r).expect("ref serializes"))?;
            }
        }
        inner.used_bytes += size;
        inner.index.insert(r.snapshot_id.clone(), r.clone());
        drop(inner);
        self.cost.observe_serialize(backend_kind, serialize_ms);
        Ok(r)
    }

    pub fn load(&self, r: &SnapshotRef) -> Result<Vec<u8>, SnapshotError> {
        let inner = self.inner.lock();
        let Some(known) = inner.index.get(&r.snapshot_id) else {
            return Err(SnapshotError::UnknownRef(r.snapshot_id.clone()));
        };
        match &inner.backing {
            Backing::Memory(blobs) => Ok(blobs[&r.snapshot_id].clone()),
            Backing::Disk { root } => {
                let path = blob_path(root, known);
                drop(inner);
                fs::read(path).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => SnapshotError::UnknownRef(r.snapshot_id.clone()),
                    _ => e.into(),
                })
            }
        }
    }

    pub fn drop_ref(&self, r: &SnapshotRef) -> Result<(), SnapshotError> {
        let mut inner = self.inner.lock();
        let Some(known) = inner.index.remove(&r.snapshot_id) else {
            return Err(SnapshotError::UnknownRef(r.snapshot_id.clone()));
        };
        inner.used_bytes -= known.size_bytes;
        match &mut inner.backing {
            Backing::Memory(blobs) => {
                blobs.remove(&r.snapshot_id);
            }
            Backing::Disk { root } => {
                let _ = fs::remove_file(blob_path(root, &known));
            }
        }
        Ok(())
    }

    /// Drops every stored snapshot whose id is not in `live`. Used after a
    /// restart to reclaim snapshots no persisted graph references.
    pub fn retain(&self, live: &std::collections::HashSet<String>) -> usize {
        let ids: Vec<SnapshotRef> = {
            let inner = self.inner.lock();
            inner.index.values().filter(|r| !live.contains(&r.snapshot_id)).cloned().collect()
        };
        for r in &ids {
            let _ = self.drop_ref(r);
        }
        ids.len()
    }
}

fn blob_path(root: &Path, r: &SnapshotRef) -> PathBuf {
    root.join(&r.backend_kind).join(format!("{}.bin", r.snapshot_id))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;

    fn est(ser: f64, res: f64) -> CostEstimate {
        CostEstimate { serialize_ms_ema: ser, restore_ms_ema: res }
    }

    #[test]
    fn policy_examples() {
        assert!(should_snapshot(10_000.0, &est(1000.0, 1000.0)));
        assert!(!should_snapshot(50.0, &est(1000.0, 1000.0)));
        assert!(!should_snapshot(2000.0, &est(1000.0, 1000.0)));
    }

    #[test]
    fn cold_start_is_pessimistic() {
        let m = CostModel::default();
        assert_eq!(m.estimate("x"), est(1000.0, 1000.0));
        assert!(!m.should_snapshot(1999.0, "x"));
        assert!(m.should_snapshot(2000.5, "x"));
    }

    #[test]
    fn ema_update_formula() {
        let m = CostModel::new(0.5, 100.0);
        m.observe_restore("k", 200.0);
        assert_eq!(m.estimate("k").restore_ms_ema, 150.0);
        assert_eq!(m.estimate("k").serialize_ms_ema, 100.0);
    }

    #[test]
    fn ema_converges_geometrically() {
        let m = CostModel::new(0.2, 1000.0);
        let c = 40.0;
        for k in 1..=30 {
            m.observe_restore("k", c);
            let bound = (1000.0f64 - c).abs() * 0.8f64.powi(k) + 1e-9;
            assert!((m.estimate("k").restore_ms_ema - c).abs() <= bound);
        }
    }

    proptest! {
        #[test]
        fn ema_matches_fold(alpha in 0.01f64..=1.0, xs in prop::collection::vec(0.0f64..10_000.0, 0..64)) {
            let m = CostModel::new(alpha, 1000.0);
            for &x in &xs {
                m.observe_serialize("k", x);
            }
            let oracle = xs.iter().fold(1000.0, |ema, &x| (1.0 - alpha) * ema + alpha * x);
            prop_assert!((m.estimate("k").serialize_ms_ema - oracle).abs() < 1e-9);
        }

        #[test]
        fn policy_is_monotone(a in 0.0f64..5000.0, b in 0.0f64..5000.0, s in 0.0f64..2000.0, r in 0.0f64..2000.0) {
            let e = est(s, r);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(!should_snapshot(lo, &e) || should_snapshot(hi, &e));
        }

        #[test]
        fn memory_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..4096)) {
            let store = SnapshotStore::in_memory(1 << 20, Arc::default());
            let r = store.store(&bytes, "file_tree", 1.0).unwrap();
            prop_assert_eq!(store.load(&r).unwrap(), bytes);
        }
    }

    #[test]
    fn store_feeds_cost_model() {
        let store = SnapshotStore::in_memory(1 << 20, Arc::new(CostModel::new(0.5, 100.0)));
        store.store(b"abc", "k", 300.0).unwrap();
        assert_eq!(store.cost_model().estimate("k").serialize_ms_ema, 200.0);
    }

    #[test]
    fn load_after_drop_is_unknown() {
        let store = SnapshotStore::in_memory(1 << 20, Arc::default());
        let r = store.store(b"abc", "k", 1.0).unwrap();
        store.drop_ref(&r).unwrap();
        assert!(matches!(store.load(&r), Err(SnapshotError::UnknownRef(_))));
        assert!(matches!(store.drop_ref(&r), Err(SnapshotError::UnknownRef(_))));
        assert_eq!(store.used_bytes(), 0);
    }

    #[test]
    fn storage_full_starts_exactly_past_cap() {
        let size = 100usize;
        let store = SnapshotStore::in_memory(50 * size as u64, Arc::default());
        let payload = vec![7u8; size];
        let outcomes: Vec<bool> = (0..100).map(|_| store.store(&payload, "k", 1.0).is_ok()).collect();
        let first_fail = outcomes.iter().position(|ok| !ok).unwrap();
        assert_eq!(first_fail, 50);
        assert!(outcomes[50..].iter().all(|ok| !ok));
        assert!(matches!(store.store(&payload, "k", 1.0), Err(SnapshotError::StorageFull { .. })));
    }

    #[test]
    fn snapshot_ids_are_unique() {
        let store = SnapshotStore::in_memory(1 << 20, Arc::default());
        let ids: std::collections::HashSet<String> =
            (0..1000).map(|_| store.store(b"same", "k", 1.0).unwrap().snapshot_id).collect();
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn disk_store_layout_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::open(dir.path(), 1 << 20, Arc::default()).unwrap();
        let a = store.store(b"alpha", "file_tree", 2.0).unwrap();
        let b = store.store(b"beta", "file_tree", 2.0).unwrap();
        assert!(dir.path().join("file_tree").join(format!("{}.bin", a.snapshot_id)).exists());
        store.drop_ref(&b).unwrap();
        drop(store);

        let reopened = SnapshotStore::open(dir.path(), 1 << 20, Arc::default()).unwrap();
        assert_eq!(reopened.load(&a).unwrap(), b"alpha");
        assert!(matches!(reopened.load(&b), Err(SnapshotError::UnknownRef(_))));
        assert_eq!(reopened.used_bytes(), 5);
        let index = fs::read_to_string(dir.path().join("index.jsonl")).unwrap();
        assert_eq!(index.lines().count(), 1);
    }

    #[test]
    fn rejects_path_like_backend_kind() {
        let store = SnapshotStore::in_memory(1 << 20, Arc::default());
        assert!(matches!(store.store(b"x", "../x", 1.0), Err(SnapshotError::InvalidKind(_))));
    }
}
