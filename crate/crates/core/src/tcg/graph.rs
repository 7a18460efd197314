use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::descriptor::{ToolDescriptor, ToolResult, Trajectory};
use super::TcgError;
use crate::snapshot::SnapshotRef;

/// Identifier of a node inside one task graph. The root is always `NodeId(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Opaque token pinning one snapshot-bearing node against eviction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LeaseId(pub String);

impl LeaseId {
    fn mint() -> Self {
        LeaseId(uuid::Uuid::new_v4().simple().to_string())
    }
}

impl std::fmt::Display for LeaseId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub const DEFAULT_LEASE_TTL: Duration = Duration::from_secs(300);

pub(crate) fn unix_micros() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

/// A stateless tool result indexed under the node reached by the stateful
/// prefix that precedes it.
#[derive(Debug)]
pub struct Attachment {
    pub descriptor: ToolDescriptor,
    pub result: ToolResult,
    pub hit_count: AtomicU64,
}

/// One cached `(tool, result, snapshot)` triple plus tree bookkeeping.
#[derive(Debug)]
pub struct TcgNode {
    pub(crate) id: NodeId,
    pub(crate) parent: Option<NodeId>,
    pub(crate) descriptor: Option<ToolDescriptor>,
    pub(crate) result: Option<ToolResult>,
    pub(crate) snapshot: Option<SnapshotRef>,
    pub(crate) children: BTreeMap<String, NodeId>,
    pub(crate) stateless: BTreeMap<String, Attachment>,
    pub(crate) ref_count: u32,
    pub(crate) hit_count: AtomicU64,
    pub(crate) depth: u32,
    pub(crate) created_at: u64,
}

impl TcgNode {
    fn root(created_at: u64) -> Self {
        Self {
            id: NodeId::ROOT,
            parent: None,
            descriptor: None,
            result: None,
            snapshot: None,
            children: BTreeMap::new(),
            stateless: BTreeMap::new(),
            ref_count: 0,
            hit_count: AtomicU64::new(0),
            depth: 0,
            created_at,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }
    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }
    pub fn descriptor(&self) -> Option<&ToolDescriptor> {
        self.descriptor.as_ref()
    }
    pub fn result(&self) -> Option<&ToolResult> {
        self.result.as_ref()
    }
    pub fn snapshot(&self) -> Option<&SnapshotRef> {
        self.snapshot.as_ref()
    }
    pub fn children(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.children.iter().map(|(k, v)| (k.as_str(), *v))
    }
    pub fn child_count(&self) -> usize {
        self.children.len()
    }
    pub fn attachments(&self) -> impl Iterator<Item = &Attachment> {
        self.stateless.values()
    }
    pub fn ref_count(&self) -> u32 {
        self.ref_count
    }
    pub fn hit_count(&self) -> u64 {
        self.hit_count.load(Ordering::Relaxed)
    }
    pub fn depth(&self) -> u32 {
        self.depth
    }
    pub fn created_at(&self) -> u64 {
        self.created_at
    }

    /// Reuse score used to order eviction victims; lower is evicted first.
    pub fn reuse_score(&self) -> f64 {
        reuse_score(self.hit_count(), self.children.len(), self.depth)
    }
}

/// `(hits + 1) * (children + 1) / (depth + 1)`.
pub fn reuse_score(hit_count: u64, children: usize, depth: u32) -> f64 {
    (hit_count as f64 + 1.0) * (children as f64 + 1.0) / (f64::from(depth) + 1.0)
}

/// Monotonic aggregate counters for one task graph.
#[derive(Debug, Default)]
pub struct GraphStats {
    pub hits: AtomicU64,
    pub misses: AtomicU64,
    pub lpm_hits: AtomicU64,
    pub inserts: AtomicU64,
    pub evictions: AtomicU64,
    pub divergent_inserts: AtomicU64,
    pub leaked_leases: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub hits: u64,
    pub misses: u64,
    pub lpm_hits: u64,
    pub inserts: u64,
    pub evictions: u64,
    pub divergent_inserts: u64,
    pub leaked_leases: u64,
}

impl GraphStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            lpm_hits: self.lpm_hits.load(Ordering::Relaxed),
            inserts: self.inserts.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            divergent_inserts: self.divergent_inserts.load(Ordering::Relaxed),
            leaked_leases: self.leaked_leases.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn from_snapshot(s: &StatsSnapshot) -> Self {
        Self {
            hits: AtomicU64::new(s.hits),
            misses: AtomicU64::new(s.misses),
            lpm_hits: AtomicU64::new(s.lpm_hits),
            inserts: AtomicU64::new(s.inserts),
            evictions: AtomicU64::new(s.evictions),
            divergent_inserts: AtomicU64::new(s.divergent_inserts),
            leaked_leases: AtomicU64::new(s.leaked_leases),
        }
    }
}

/// Outcome of a longest-prefix match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixMatch {
    pub matched_len: usize,
    pub node_id: NodeId,
    pub snapshot_node_id: Option<NodeId>,
    /// Depth of `snapshot_node_id`, i.e. how many steps of the query it covers.
    pub snapshot_depth: Option<usize>,
    pub snapshot: Option<SnapshotRef>,
    pub lease_id: Option<LeaseId>,
}

/// Result of an insert; `created` is false for idempotent repeats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertOutcome {
    pub node_id: NodeId,
    pub created: bool,
    /// True when the supplied snapshot was attached to the node.
    pub snapshot_adopted: bool,
}

/// A snapshot removed from a node by eviction. The caller owns releasing its
/// storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Eviction {
    pub node_id: NodeId,
    pub snapshot: SnapshotRef,
}

#[derive(Debug, Clone)]
struct Lease {
    node: NodeId,
    expires_at: Instant,
}

/// Per-task tool call graph.
#[derive(Debug)]
pub struct TaskGraph {
    pub(crate) task_id: String,
    pub(crate) nodes: Vec<TcgNode>,
    pub(crate) snapshot_budget: usize,
    pub(crate) stats: GraphStats,
    snapshot_count: usize,
    leases: HashMap<LeaseId, Lease>,
    expired_leases: HashSet<LeaseId>,
    lease_ttl: Duration,
    generation: u64,
}

impl TaskGraph {
    pub fn new(task_id: impl Into<String>, snapshot_budget: usize) -> Self {
        Self::from_parts(task_id.into(), vec![TcgNode::root(unix_micros())], snapshot_budget, GraphStats::default())
    }

    pub(crate) fn from_parts(
        task_id: String,
        nodes: Vec<TcgNode>,
        snapshot_budget: usize,
        stats: GraphStats,
    ) -> Self {
        let snapshot_count = nodes.iter().filter(|n| n.snapshot.is_some()).count();
        Self {
            task_id,
            nodes,
            snapshot_budget: snapshot_budget.max(1),
            stats,
            snapshot_count,
            leases: HashMap::new(),
            expired_leases: HashSet::new(),
            lease_ttl: DEFAULT_LEASE_TTL,
            generation: 0,
        }
    }

    pub fn with_lease_ttl(mut self, ttl: Duration) -> Self {
        self.lease_ttl = ttl;
        self
    }

    pub fn set_lease_ttl(&mut self, ttl: Duration) {
        self.lease_ttl = ttl;
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn snapshot_budget(&self) -> usize {
        self.snapshot_budget
    }

    pub fn set_snapshot_budget(&mut self, budget: usize) {
        self.snapshot_budget = budget.max(1);
    }

    /// Number of nodes including the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn snapshot_count(&self) -> usize {
        self.snapshot_count
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    /// Bumped on every structural or snapshot mutation; drives dirty tracking.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn root(&self) -> &TcgNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> Option<&TcgNode> {
        self.nodes.get(id.index())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TcgNode> {
        self.nodes.iter()
    }

    pub fn active_leases(&self) -> usize {
        self.leases.len()
    }

    fn child_of(&self, node: NodeId, step: &ToolDescriptor) -> Option<NodeId> {
        self.nodes[node.index()].children.get(&step.key()).copied()
    }

    /// Walks the root-anchored path for `steps`, returning how many matched
    /// and the last node reached.
    fn walk(&self, steps: &[ToolDescriptor]) -> (usize, NodeId) {
        let mut cur = NodeId::ROOT;
        for (i, step) in steps.iter().enumerate() {
            match self.child_of(cur, step) {
                Some(next) => cur = next,
                None => return (i, cur),
            }
        }
        (steps.len(), cur)
    }

    /// Node at the end of `trajectory`, if the whole path exists.
    pub fn find(&self, trajectory: &Trajectory) -> Option<NodeId> {
        let (matched, node) = self.walk(trajectory.steps());
        (matched == trajectory.len()).then_some(node)
    }

    /// Inserts the final step of `trajectory` under the existing path of the
    /// preceding steps. Idempotent: a repeat returns the existing node and
    /// keeps the first stored result.
    pub fn insert(
        &mut self,
        trajectory: &Trajectory,
        result: ToolResult,
        snapshot: Option<SnapshotRef>,
    ) -> Result<InsertOutcome, TcgError> {
        let Some((last, prefix)) = trajectory.steps().split_last() else {
            return Err(TcgError::EmptyTrajectory);
        };
        let (matched, parent) = self.walk(prefix);
        if matched != prefix.len() {
            return Err(TcgError::MissingPrefix { matched, expected: prefix.len() });
        }
        let key = last.key();
        if let Some(&existing) = self.nodes[parent.index()].children.get(&key) {
            let node = &mut self.nodes[existing.index()];
            if let Some(stored) = &node.result {
                if !stored.same_value(&result) {
                    self.stats.divergent_inserts.fetch_add(1, Ordering::Relaxed);
                    tracing::warn!(task = %self.task_id, node = %existing, "divergent insert ignored");
                }
            }
            let mut adopted = false;
            if node.snapshot.is_none() {
                if let Some(snap) = snapshot {
                    node.snapshot = Some(snap);
                    self.snapshot_count += 1;
                    self.generation += 1;
                    adopted = true;
                }
            }
            return Ok(InsertOutcome { node_id: existing, created: false, snapshot_adopted: adopted });
        }

        let id = NodeId(self.nodes.len() as u64);
        let depth = self.nodes[parent.index()].depth + 1;
        let adopted = snapshot.is_some();
        if adopted {
            self.snapshot_count += 1;
        }
        self.nodes.push(TcgNode {
            id,
            parent: Some(parent),
            descriptor: Some(last.clone()),
            result: Some(result),
            snapshot,
            children: BTreeMap::new(),
            stateless: BTreeMap::new(),
            ref_count: 0,
            hit_count: AtomicU64::new(0),
            depth,
            created_at: unix_micros(),
        });
        self.nodes[parent.index()].children.insert(key, id);
        self.stats.inserts.fetch_add(1, Ordering::Relaxed);
        self.generation += 1;
        Ok(InsertOutcome { node_id: id, created: true, snapshot_adopted: adopted })
    }

    /// Exact lookup of the full trajectory.
    pub fn lookup_exact(&self, trajectory: &Trajectory) -> Option<ToolResult> {
        let found = if trajectory.is_empty() { None } else { self.find(trajectory) };
        match found {
            Some(id) => {
                let node = &self.nodes[id.index()];
                node.hit_count.fetch_add(1, Ordering::Relaxed);
                self.stats.hits.fetch_add(1, Ordering::Relaxed);
                node.result.clone()
            }
            None => {
                self.stats.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    /// Stateful-skip lookup: `history` is filtered to its mutating steps, and
    /// the target is looked up either among the stateless attachments of the
    /// node that prefix reaches, or as an ordinary child when it mutates.
    pub fn lookup_stateful(&self, history: &Trajectory, target: &ToolDescriptor) -> Option<ToolResult> {
        let spine = history.filter_stateful();
        let found = self.find(&spine).and_then(|node| {
            let node = &self.nodes[node.index()];
            if target.mutates_state() {
                node.children.get(&target.key()).map(|&child| {
                    let child = &self.nodes[child.index()];
                    child.hit_count.fetch_add(1, Ordering::Relaxed);
                    child.result.clone().expect("non-root node has a result")
                })
            } else {
                node.stateless.get(&target.key()).map(|a| {
                    a.hit_count.fetch_add(1, Ordering::Relaxed);
                    a.result.clone()
                })
            }
        });
        let counter = if found.is_some() { &self.stats.hits } else { &self.stats.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    /// Stores a stateless result under the node reached by `stateful_prefix`.
    pub fn attach_stateless(
        &mut self,
        stateful_prefix: &Trajectory,
        descriptor: &ToolDescriptor,
        result: ToolResult,
    ) -> Result<NodeId, TcgError> {
        if descriptor.mutates_state() {
            return Err(TcgError::InvalidDescriptor(format!("{descriptor} mutates state")));
        }
        if let Some(step) = stateful_prefix.steps().iter().find(|s| !s.mutates_state()) {
            return Err(TcgError::InvalidDescriptor(format!("stateless step {step} in stateful prefix")));
        }
        let (matched, node) = self.walk(stateful_prefix.steps());
        if matched != stateful_prefix.len() {
            return Err(TcgError::MissingPrefix { matched, expected: stateful_prefix.len() });
        }
        let key = descriptor.key();
        let n = &mut self.nodes[node.index()];
        match n.stateless.get(&key) {
            Some(existing) => {
                if !existing.result.same_value(&result) {
                    self.stats.divergent_inserts.fetch_add(1, Ordering::Relaxed);
                }
            }
            None => {
                n.stateless.insert(
                    key,
                    Attachment { descriptor: descriptor.clone(), result, hit_count: AtomicU64::new(0) },
                );
                self.stats.inserts.fetch_add(1, Ordering::Relaxed);
                self.generation += 1;
            }
        }
        Ok(node)
    }

    /// Longest root-anchored path that is a prefix of `trajectory`. When the
    /// matched path holds a snapshot, the deepest one is leased (its node's
    /// ref count is incremented) before returning.
    pub fn longest_prefix_match(&mut self, trajectory: &Trajectory) -> PrefixMatch {
        self.longest_prefix_match_at(trajectory, Instant::now())
    }

    pub fn longest_prefix_match_at(&mut self, trajectory: &Trajectory, now: Instant) -> PrefixMatch {
        let mut cur = NodeId::ROOT;
        let mut matched = 0;
        let mut deepest: Option<NodeId> = None;
        // A full match is reported as a hit by lookup_exact, not here.
        let limit = trajectory.len().saturating_sub(1);
        for step in &trajectory.steps()[..limit] {
            match self.child_of(cur, step) {
                Some(next) => {
                    cur = next;
                    matched += 1;
                    if self.nodes[cur.index()].snapshot.is_some() {
                        deepest = Some(cur);
                    }
                }
                None => break,
            }
        }
        if matched > 0 {
            self.stats.lpm_hits.fetch_add(1, Ordering::Relaxed);
        }
        let mut out = PrefixMatch {
            matched_len: matched,
            node_id: cur,
            snapshot_node_id: None,
            snapshot_depth: None,
            snapshot: None,
            lease_id: None,
        };
        if let Some(snap_node) = deepest {
            let node = &mut self.nodes[snap_node.index()];
            node.ref_count += 1;
            let lease = LeaseId::mint();
            self.leases.insert(lease.clone(), Lease { node: snap_node, expires_at: now + self.lease_ttl });
            out.snapshot_node_id = Some(snap_node);
            out.snapshot_depth = Some(node.depth as usize);
            out.snapshot = node.snapshot.clone();
            out.lease_id = Some(lease);
        }
        out
    }

    /// Consumes a lease, decrementing its node's ref count exactly once.
    pub fn release(&mut self, lease: &LeaseId) -> Result<(), TcgError> {
        self.release_at(lease, Instant::now())
    }

    pub fn release_at(&mut self, lease: &LeaseId, now: Instant) -> Result<(), TcgError> {
        self.expire_leases_at(now);
        if self.expired_leases.remove(lease) {
            return Err(TcgError::LeaseExpired(lease.clone()));
        }
        let Some(entry) = self.leases.remove(lease) else {
            return Err(TcgError::UnknownLease(lease.clone()));
        };
        let node = &mut self.nodes[entry.node.index()];
        node.ref_count = node.ref_count.saturating_sub(1);
        Ok(())
    }

    /// Drops leases past their TTL, decrementing ref counts. Returns the
    /// number of leases expired.
    pub fn expire_leases_at(&mut self, now: Instant) -> usize {
        let expired: Vec<LeaseId> =
            self.leases.iter().filter(|(_, l)| l.expires_at <= now).map(|(id, _)| id.clone()).collect();
        for id in &expired {
            let lease = self.leases.remove(id).expect("collected above");
            let node = &mut self.nodes[lease.node.index()];
            node.ref_count = node.ref_count.saturating_sub(1);
            self.stats.leaked_leases.fetch_add(1, Ordering::Relaxed);
            tracing::warn!(task = %self.task_id, lease = %id, node = %lease.node, "lease expired without release");
            self.expired_leases.insert(id.clone());
        }
        expired.len()
    }

    /// Drops snapshots until the snapshot count is within budget. Only nodes
    /// whose whole subtree is unreferenced are eligible; victims go in
    /// ascending reuse-score order, ties broken by age then id. Results are
    /// never evicted.
    pub fn evict(&mut self) -> Vec<Eviction> {
        if self.snapshot_count <= self.snapshot_budget {
            return Vec::new();
        }
        // Children always have larger ids than their parents, so one reverse
        // pass accumulates subtree reference totals.
        let mut subtree_refs: Vec<u64> = self.nodes.iter().map(|n| u64::from(n.ref_count)).collect();
        for node in self.nodes.iter().rev() {
            if let Some(parent) = node.parent {
                subtree_refs[parent.index()] += subtree_refs[node.id.index()];
            }
        }
        let mut candidates: Vec<(f64, u64, NodeId)> = self
            .nodes
            .iter()
            .filter(|n| n.snapshot.is_some() && subtree_refs[n.id.index()] == 0)
            .map(|n| (n.reuse_score(), n.created_at, n.id))
            .collect();
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap_or(CmpOrdering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });

        let excess = self.snapshot_count - self.snapshot_budget;
        let mut evicted = Vec::with_capacity(excess.min(candidates.len()));
        for (_, _, id) in candidates.into_iter().take(excess) {
            let snapshot = self.nodes[id.index()].snapshot.take().expect("candidate has snapshot");
            self.snapshot_count -= 1;
            evicted.push(Eviction { node_id: id, snapshot });
        }
        if !evicted.is_empty() {
            self.stats.evictions.fetch_add(evicted.len() as u64, Ordering::Relaxed);
            self.generation += 1;
        }
        if self.snapshot_count > self.snapshot_budget {
            tracing::info!(
                task = %self.task_id,
                snapshots = self.snapshot_count,
                budget = self.snapshot_budget,
                "snapshot budget unreachable while snapshots are referenced; eviction deferred"
            );
        }
        evicted
    }

    /// Attaches `snapshot` to an existing non-root node that has none.
    pub fn adopt_snapshot(&mut self, node: NodeId, snapshot: SnapshotRef) -> bool {
        match self.nodes.get_mut(node.index()) {
            Some(n) if n.parent.is_some() && n.snapshot.is_none() => {
                n.snapshot = Some(snapshot);
                self.snapshot_count += 1;
                self.generation += 1;
                true
            }
            _ => false,
        }
    }

    /// Removes a snapshot whose backing storage turned out to be gone.
    pub fn forget_snapshot(&mut self, node: NodeId, snapshot_id: &str) -> bool {
        let Some(n) = self.nodes.get_mut(node.index()) else { return false };
        if n.snapshot.as_ref().is_some_and(|s| s.snapshot_id == snapshot_id) {
            n.snapshot = None;
            self.snapshot_count -= 1;
            self.generation += 1;
            return true;
        }
        false
    }

    /// Root-anchored trajectory that reaches `node`.
    pub fn path_to(&self, node: NodeId) -> Option<Trajectory> {
        let mut steps = Vec::new();
        let mut cur = self.node(node)?;
        while let Some(parent) = cur.parent {
            steps.push(cur.descriptor.clone().expect("non-root node has a descriptor"));
            cur = &self.nodes[parent.index()];
        }
        steps.reverse();
        Some(Trajectory::new(steps))
    }
}
