//! The tool call graph: a per-task tree of observed tool-call trajectories.

mod descriptor;
mod dot;
mod graph;
mod persist;

pub use descriptor::{
    canonical_args, filter_stateful, fnv1a64, ResultStatus, ToolDescriptor, ToolResult, Trajectory, RECORD_SEP,
    UNIT_SEP,
};
pub use dot::export_dot;
pub use graph::{
    reuse_score, Attachment, Eviction, GraphStats, InsertOutcome, LeaseId, NodeId, PrefixMatch, StatsSnapshot,
    TaskGraph, TcgNode, DEFAULT_LEASE_TTL,
};
pub use persist::{persist, persist_to_file, restore, restore_from_file, PERSIST_MAGIC};

pub(crate) use graph::unix_micros;

#[derive(Debug, thiserror::Error)]
pub enum TcgError {
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("missing prefix: matched {matched} of {expected} steps")]
    MissingPrefix { matched: usize, expected: usize },
    #[error("unknown lease {0}")]
    UnknownLease(LeaseId),
    #[error("lease {0} expired before release")]
    LeaseExpired(LeaseId),
    #[error("corrupt graph file at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("unsupported graph file version {0:?}")]
    VersionMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
