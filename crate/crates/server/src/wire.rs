//! JSON bodies of the HTTP endpoints. Payloads travel as base64.

use serde::{Deserialize, Serialize};

use tvcache_core::cache::{EvictedSnapshot, MatchMode};
use tvcache_core::forkpool::PoolStats;
use tvcache_core::snapshot::SnapshotRef;
use tvcache_core::tcg::{fnv1a64, LeaseId, NodeId, PrefixMatch, ToolDescriptor, ToolResult, Trajectory};

/// Header carrying the base64 of the encoded trajectory key on `GET /get`.
pub const KEY_HEADER: &str = "x-tvc-key";

/// Shard owning `task_id` among `shard_count` shards.
pub fn shard_for(task_id: &str, shard_count: usize) -> usize {
    (fnv1a64(task_id.as_bytes()) % shard_count.max(1) as u64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PutRequest {
    pub task_id: String,
    pub trajectory: Vec<ToolDescriptor>,
    pub result: ToolResult,
    /// Full snapshot reference; preferred over `snapshot_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<SnapshotRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_id: Option<String>,
    #[serde(default)]
    pub mode: MatchMode,
}

impl PutRequest {
    /// The snapshot reference, synthesizing a bare one from `snapshot_id`.
    pub fn snapshot_ref(&self) -> Option<SnapshotRef> {
        self.snapshot.clone().or_else(|| {
            self.snapshot_id.as_ref().map(|id| SnapshotRef {
                snapshot_id: id.clone(),
                size_bytes: 0,
                serialize_ms: 0.0,
                created_at: 0,
                backend_kind: String::new(),
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PutResponse {
    pub node_id: NodeId,
    pub created: bool,
    pub snapshot_adopted: bool,
    /// Snapshots the server stopped referencing; their owner frees them.
    pub evicted: Vec<EvictedSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupRequest {
    pub task_id: String,
    pub trajectory: Vec<ToolDescriptor>,
    #[serde(default)]
    pub mode: MatchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GetResponse {
    pub hit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ToolResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixMatchResponse {
    pub matched_len: usize,
    pub node_id: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_node_id: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<SnapshotRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease_id: Option<LeaseId>,
}

impl From<PrefixMatch> for PrefixMatchResponse {
    fn from(m: PrefixMatch) -> Self {
        Self {
            matched_len: m.matched_len,
            node_id: m.node_id,
            snapshot_node_id: m.snapshot_node_id,
            snapshot_depth: m.snapshot_depth,
            snapshot_id: m.snapshot.as_ref().map(|s| s.snapshot_id.clone()),
            snapshot: m.snapshot,
            lease_id: m.lease_id,
        }
    }
}

impl From<PrefixMatchResponse> for PrefixMatch {
    fn from(r: PrefixMatchResponse) -> Self {
        let snapshot = r.snapshot.or_else(|| {
            r.snapshot_id.map(|id| SnapshotRef {
                snapshot_id: id,
                size_bytes: 0,
                serialize_ms: 0.0,
                created_at: 0,
                backend_kind: String::new(),
            })
        });
        PrefixMatch {
            matched_len: r.matched_len,
            node_id: r.node_id,
            snapshot_node_id: r.snapshot_node_id,
            snapshot_depth: r.snapshot_depth,
            snapshot,
            lease_id: r.lease_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseRequest {
    pub task_id: String,
    pub lease_id: LeaseId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseResponse {
    pub released: bool,
    pub evicted: Vec<EvictedSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolReport {
    pub client_id: String,
    pub stats: PoolStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PersistReport {
    pub written: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub kind: String,
}

pub fn trajectory(steps: &[ToolDescriptor]) -> Trajectory {
    Trajectory::new(steps.to_vec())
}
