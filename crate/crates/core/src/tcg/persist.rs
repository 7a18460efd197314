//! On-disk graph format: a `TVC1` header line, then length-prefixed JSON
//! records (u32 little-endian length, then the JSON bytes). The first record
//! describes the graph, the rest are nodes in breadth-first order.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::descriptor::{ToolDescriptor, ToolResult};
use super::graph::{Attachment, GraphStats, NodeId, StatsSnapshot, TaskGraph, TcgNode};
use super::TcgError;
use crate::snapshot::SnapshotRef;

pub const PERSIST_MAGIC: &str = "TVC1";

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    task_id: String,
    node_count: u64,
    snapshot_budget: usize,
    stats: StatsSnapshot,
}

#[derive(Serialize, Deserialize)]
struct AttachmentRecord {
    descriptor: ToolDescriptor,
    result: ToolResult,
    hit_count: u64,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    node_id: u64,
    parent_id: Option<u64>,
    descriptor: Option<ToolDescriptor>,
    result: Option<ToolResult>,
    snapshot: Option<SnapshotRef>,
    hit_count: u64,
    created_at: u64,
    stateless: Vec<AttachmentRecord>,
}

/// Serializes `graph`. Leases and reference counts are not written.
pub fn persist<W: Write>(graph: &TaskGraph, mut out: W) -> Result<(), TcgError> {
    out.write_all(PERSIST_MAGIC.as_bytes())?;
    out.write_all(b"\n")?;
    let meta = MetaRecord {
        task_id: graph.task_id().to_string(),
        node_count: graph.node_count() as u64,
        snapshot_budget: graph.snapshot_budget(),
        stats: graph.stats(),
    };
    write_record(&mut out, &meta)?;

    let mut queue = VecDeque::from([NodeId::ROOT]);
    while let Some(id) = queue.pop_front() {
        let node = graph.node(id).expect("child ids are valid");
        let record = NodeRecord {
            node_id: id.0,
            parent_id: node.parent().map(|p| p.0),
            descriptor: node.descriptor().cloned(),
            result: node.result().cloned(),
            snapshot: node.snapshot().cloned(),
            hit_count: node.hit_count(),
            created_at: node.created_at(),
            stateless: node
                .attachments()
                .map(|a| AttachmentRecord {
                    descriptor: a.descriptor.clone(),
                    result: a.result.clone(),
                    hit_count: a.hit_count.load(Ordering::Relaxed),
                })
                .collect(),
        };
        write_record(&mut out, &record)?;
        queue.extend(node.children().map(|(_, c)| c));
    }
    out.flush()?;
    Ok(())
}

fn write_record<W: Write, T: Serialize>(out: &mut W, record: &T) -> Result<(), TcgError> {
    let bytes = serde_json::to_vec(record).map_err(|e| TcgError::Io(e.into()))?;
    let len = u32::try_from(bytes.len())
        .map_err(|_| TcgError::Io(std::io::Error::other("record exceeds 4 GiB")))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&bytes)?;
    Ok(())
}

/// Writes to a sibling temp file, syncs it and renames it over `path`, so a
/// crash leaves either the old or the new file.
pub fn persist_to_file(graph: &TaskGraph, path: &Path) -> Result<(), TcgError> {
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp)?;
    let mut writer = BufWriter::new(file);
    persist(graph, &mut writer)?;
    let file = writer.into_inner().map_err(|e| TcgError::Io(e.into_error()))?;
    file.sync_all()?;
    drop(file);
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

pub fn restore_from_file(path: &Path) -> Result<TaskGraph, TcgError> {
    restore(BufReader::new(File::open(path)?))
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn corrupt(&self, reason: impl Into<String>) -> TcgError {
        TcgError::Corrupt { offset: self.offset, reason: reason.into() }
    }

    /// Reads exactly `buf.len()` bytes; `Ok(false)` on a clean EOF before
    /// the first byte.
    fn fill(&mut self, buf: &mut [u8]) -> Result<bool, TcgError> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) if read == 0 => return Ok(false),
                Ok(0) => {
                    self.offset += read as u64;
                    return Err(self.corrupt("unexpected end of file"));
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += read as u64;
        Ok(true)
    }

    fn record<T: for<'de> Deserialize<'de>>(&mut self) -> Result<Option<T>, TcgError> {
        let start = self.offset;
        let mut len = [0u8; 4];
        if !self.fill(&mut len)? {
            return Ok(None);
        }
        let len = u32::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(TcgError::Corrupt { offset: start, reason: format!("implausible record length {len}") });
        }
        let mut body = vec![0u8; len];
        if !self.fill(&mut body)? {
            return Err(self.corrupt("unexpected end of file"));
        }
        serde_json::from_slice(&body)
            .map(Some)
            .map_err(|e| TcgError::Corrupt { offset: start, reason: e.to_string() })
    }
}

/// Rebuilds a graph written by [`persist`]. Reference counts start at zero
/// and no leases exist. Nothing is returned unless the whole file is valid.
pub fn restore<R: Read>(reader: R) -> Result<TaskGraph, TcgError> {
    let mut cur = Cursor { inner: reader, offset: 0 };
    let mut header = [0u8; 5];
    if !cur.fill(&mut header)? {
        return Err(cur.corrupt("empty file"));
    }
    if header[4] != b'\n' {
        return Err(TcgError::VersionMismatch(String::from_utf8_lossy(&header).into_owned()));
    }
    if &header[..4] != PERSIST_MAGIC.as_bytes() {
        return Err(TcgError::VersionMismatch(String::from_utf8_lossy(&header[..4]).into_owned()));
    }
    let meta: MetaRecord = cur.record()?.ok_or_else(|| cur.corrupt("missing graph record"))?;
    let count = usize::try_from(meta.node_count).map_err(|_| cur.corrupt("node count overflow"))?;
    if count == 0 {
        return Err(cur.corrupt("graph without root"));
    }

    let mut slots: Vec<Option<TcgNode>> = (0..count).map(|_| None).collect();
    for _ in 0..count {
        let at = cur.offset;
        let bad = |reason: String| TcgError::Corrupt { offset: at, reason };
        let rec: NodeRecord = cur.record()?.ok_or_else(|| bad("truncated: fewer nodes than declared".into()))?;
        let idx = rec.node_id as usize;
        if idx >= count || slots[idx].is_some() {
            return Err(bad(format!("bad or duplicate node id {}", rec.node_id)));
        }
        let depth = match rec.parent_id {
            None if idx == 0 => 0,
            Some(p) if p < rec.node_id => match &slots[p as usize] {
                Some(parent) => parent.depth + 1,
                None => return Err(bad(format!("node {} precedes its parent", rec.node_id))),
            },
            _ => return Err(bad(format!("bad parent for node {}", rec.node_id))),
        };
        if (idx == 0) != rec.descriptor.is_none() || rec.descriptor.is_some() != rec.result.is_some() {
            return Err(bad(format!("node {} has inconsistent descriptor/result", rec.node_id)));
        }
        let mut stateless = BTreeMap::new();
        for a in rec.stateless {
            stateless.insert(
                a.descriptor.key(),
                Attachment { descriptor: a.descriptor, result: a.result, hit_count: AtomicU64::new(a.hit_count) },
            );
        }
        if let (Some(p), Some(desc)) = (rec.parent_id, &rec.descriptor) {
            let parent = slots[p as usize].as_mut().expect("checked above");
            if parent.children.insert(desc.key(), NodeId(rec.node_id)).is_some() {
                return Err(bad(format!("duplicate child key under node {p}")));
            }
        }
        slots[idx] = Some(TcgNode {
            id: NodeId(rec.node_id),
            parent: rec.parent_id.map(NodeId),
            descriptor: rec.descriptor,
            result: rec.result,
            snapshot: rec.snapshot,
            children: BTreeMap::new(),
            stateless,
            ref_count: 0,
            hit_count: AtomicU64::new(rec.hit_count),
            depth,
            created_at: rec.created_at,
        });
    }
    let mut trailing = [0u8; 1];
    if cur.fill(&mut trailing).unwrap_or(true) {
        return Err(cur.corrupt("trailing bytes after last node"));
    }
    let nodes: Vec<TcgNode> = slots.into_iter().map(|n| n.expect("all slots filled")).collect();
    Ok(TaskGraph::from_parts(meta.task_id, nodes, meta.snapshot_budget, GraphStats::from_snapshot(&meta.stats)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcg::export_dot;
    use crate::tcg::fixtures::*;

    fn round_trip(g: &TaskGraph) -> TaskGraph {
        let mut buf = Vec::new();
        persist(g, &mut buf).unwrap();
        restore(buf.as_slice()).unwrap()
    }

    fn assert_same(a: &TaskGraph, b: &TaskGraph) {
        assert_eq!(a.task_id(), b.task_id());
        assert_eq!(a.node_count(), b.node_count());
        assert_eq!(a.snapshot_count(), b.snapshot_count());
        assert_eq!(a.stats(), b.stats());
        for (x, y) in a.nodes().zip(b.nodes()) {
            assert_eq!(x.id(), y.id());
            assert_eq!(x.parent(), y.parent());
            assert_eq!(x.descriptor(), y.descriptor());
            assert_eq!(x.result(), y.result());
            assert_eq!(x.snapshot(), y.snapshot());
            assert_eq!(x.hit_count(), y.hit_count());
            assert_eq!(x.depth(), y.depth());
            assert_eq!(x.created_at(), y.created_at());
            assert_eq!(x.children().collect::<Vec<_>>(), y.children().collect::<Vec<_>>());
        }
        assert_eq!(export_dot(a), export_dot(b));
    }

    #[test]
    fn empty_graph_round_trips() {
        let g = TaskGraph::new("empty", 3);
        assert_same(&g, &round_trip(&g));
    }

    #[test]
    fn sample_tree_round_trips_without_leases() {
        let mut g = sample_tree();
        g.lookup_exact(&traj(&["t1", "t2"]));
        let lease = g.longest_prefix_match(&traj(&["t1", "t2", "t3", "t7"])).lease_id.unwrap();
        let mut r = round_trip(&g);
        assert_same(&g, &r);
        assert!(r.nodes().all(|n| n.ref_count() == 0));
        assert!(matches!(r.release(&lease), Err(TcgError::UnknownLease(_))));
    }

    #[test]
    fn attachments_round_trip() {
        let mut g = sample_tree();
        g.attach_stateless(&traj(&["t1", "t2"]), &s("ls"), res("a\nb")).unwrap();
        let r = round_trip(&g);
        assert_eq!(r.lookup_stateful(&traj(&["t1", "t2"]), &s("ls")).unwrap().payload, b"a\nb");
    }

    #[test]
    fn persist_is_deterministic() {
        let g = sample_tree();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        persist(&g, &mut a).unwrap();
        persist(&g, &mut b).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"TVC1\n"));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let mut buf = Vec::new();
        persist(&sample_tree(), &mut buf).unwrap();
        for cut in 0..buf.len() {
            let err = restore(&buf[..cut]).unwrap_err();
            assert!(matches!(err, TcgError::Corrupt { .. } | TcgError::VersionMismatch(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        persist(&sample_tree(), &mut buf).unwrap();
        let cut = buf.len() - 3;
        match restore(&buf[..cut]) {
            Err(TcgError::Corrupt { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut buf = Vec::new();
        persist(&sample_tree(), &mut buf).unwrap();
        buf[3] = b'9';
        assert!(matches!(restore(buf.as_slice()), Err(TcgError::VersionMismatch(v)) if v == "TVC9"));
    }

    #[test]
    fn atomic_file_write_replaces_previous() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.tvc");
        persist_to_file(&TaskGraph::new("sample_tree", 8), &path).unwrap();
        let g = sample_tree();
        persist_to_file(&g, &path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        assert_same(&g, &restore_from_file(&path).unwrap());
    }
}
