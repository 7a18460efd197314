//! In-memory file tree backend.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{arg_ms, arg_str, elapsed_ms, parse_args, precise_wait, Backend, SandboxError, SandboxHandle};
use crate::tcg::{ToolDescriptor, ToolResult};

pub const FILE_TREE_KIND: &str = "file_tree";
/// Negative control: `read` bumps a hidden counter but is still reported
/// as stateless.
pub const BROKEN_READ_KIND: &str = "broken_read";

const MUTATING: [&str; 3] = ["write", "append", "rm"];

/// Simulated lifecycle latencies and initial contents.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileTreeConfig {
    pub start_ms: f64,
    pub fork_ms: f64,
    pub snapshot_ms: f64,
    pub restore_ms: f64,
    pub seed: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct FileTreeState {
    files: BTreeMap<String, String>,
    reads: u64,
}

pub struct FileTreeBackend {
    kind: Arc<str>,
    config: FileTreeConfig,
    count_reads: bool,
}

impl Default for FileTreeBackend {
    fn default() -> Self {
        Self::new(FileTreeConfig::default())
    }
}

impl FileTreeBackend {
    pub fn new(config: FileTreeConfig) -> Self {
        Self { kind: FILE_TREE_KIND.into(), config, count_reads: false }
    }

    pub fn broken_read() -> Self {
        Self { kind: BROKEN_READ_KIND.into(), config: FileTreeConfig::default(), count_reads: true }
    }

    /// Loads seed contents from a JSON object mapping path to content.
    pub fn seed_from_file(mut config: FileTreeConfig, path: &Path) -> Result<Self, SandboxError> {
        let text = std::fs::read_to_string(path).map_err(|e| SandboxError::Unavailable(format!("{}: {e}", path.display())))?;
        config.seed = serde_json::from_str(&text).map_err(|e| SandboxError::MalformedArgs(format!("seed file: {e}")))?;
        Ok(Self::new(config))
    }

    pub fn config(&self) -> &FileTreeConfig {
        &self.config
    }

    fn wait(ms: f64) {
        if ms > 0.0 {
            precise_wait(Duration::from_secs_f64(ms / 1000.0));
        }
    }

    fn handle(&self, state: FileTreeState) -> SandboxHandle {
        SandboxHandle::new(self.kind.clone(), Box::new(state))
    }

    fn encode(&self, state: &FileTreeState) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(state.files.len() as u32).to_le_bytes());
        for (path, content) in &state.files {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(content.len() as u32).to_le_bytes());
            out.extend_from_slice(content.as_bytes());
        }
        if self.count_reads {
            out.extend_from_slice(&state.reads.to_le_bytes());
        }
        out
    }

    fn decode(&self, bytes: &[u8]) -> Result<FileTreeState, SandboxError> {
        let mut rest = bytes;
        let mut take = |n: usize| -> Result<&[u8], SandboxError> {
            if rest.len() < n {
                return Err(SandboxError::CorruptSnapshot("truncated".into()));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        let word = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let utf8 = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| SandboxError::CorruptSnapshot("non-utf8 entry".into()));
        let count = word(take(4)?);
        let mut files = BTreeMap::new();
        for _ in 0..count {
            let n = word(take(4)?);
            let path = utf8(take(n)?)?;
            let n = word(take(4)?);
            let content = utf8(take(n)?)?;
            files.insert(path, content);
        }
        let reads = if self.count_reads { u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) } else { 0 };
        if !rest.is_empty() {
            return Err(SandboxError::CorruptSnapshot("trailing bytes".into()));
        }
        Ok(FileTreeState { files, reads })
    }
}

fn path_arg(args: &Value) -> Result<&str, SandboxError> {
    let path = arg_str(args, "path")?;
    if path.is_empty() {
        return Err(SandboxError::MalformedArgs("empty path".into()));
    }
    Ok(path)
}

impl Backend for FileTreeBackend {
    fn kind(&self) -> &str {
        &self.kind
    }

    fn start(&self) -> Result<SandboxHandle, SandboxError> {
        Self::wait(self.config.start_ms);
        Ok(self.handle(FileTreeState { files: self.config.seed.clone(), reads: 0 }))
    }

    fn fork(&self, handle: &SandboxHandle) -> Result<SandboxHandle, SandboxError> {
        let state = handle.state::<FileTreeState>(&self.kind)?.clone();
        Self::wait(self.config.fork_ms);
        Ok(self.handle(state))
    }

    fn execute(&self, handle: &mut SandboxHandle, descriptor: &ToolDescriptor) -> Result<ToolResult, SandboxError> {
        let started = Instant::now();
        let kind = self.kind.clone();
        let state = handle.state_mut::<FileTreeState>(&kind)?;
        let args = parse_args(descriptor)?;
        let cost = arg_ms(&args)?;
        let outcome: Result<String, String> = match descriptor.tool_name() {
            "write" => {
                state.files.insert(path_arg(&args)?.to_string(), arg_str(&args, "content")?.to_string());
                Ok(String::new())
            }
            "append" => {
                let content = arg_str(&args, "content")?;
                state.files.entry(path_arg(&args)?.to_string()).or_default().push_str(content);
                Ok(String::new())
            }
            "read" => {
                let path = path_arg(&args)?;
                if self.count_reads {
                    state.reads += 1;
                }
                state.files.get(path).cloned().ok_or_else(|| "no such file".to_string())
            }
            "ls" => Ok(state.files.keys().cloned().collect::<Vec<_>>().join("\n")),
            "rm" => {
                let path = path_arg(&args)?;
                state.files.remove(path).map(|_| String::new()).ok_or_else(|| "no such file".to_string())
            }
            "sleep_ms" => {
                if cost.is_none() {
                    return Err(SandboxError::MalformedArgs("sleep_ms requires ms".into()));
                }
                Ok(String::new())
            }
            other => return Err(SandboxError::MalformedArgs(format!("unknown tool {other:?}"))),
        };
        if let Some(ms) = cost {
            Self::wait(ms);
        }
        let exec_ms = elapsed_ms(started);
        Ok(match outcome {
            Ok(payload) => ToolResult::ok(payload, exec_ms),
            Err(msg) => ToolResult::tool_error(msg, exec_ms),
        })
    }

    fn will_mutate_state(&self, descriptor: &ToolDescriptor) -> bool {
        MUTATING.contains(&descriptor.tool_name())
    }

    fn snapshot(&self, handle: &SandboxHandle) -> Result<Vec<u8>, SandboxError> {
        let bytes = self.encode(handle.state::<FileTreeState>(&self.kind)?);
        Self::wait(self.config.snapshot_ms);
        Ok(bytes)
    }

    fn restore(&self, bytes: &[u8]) -> Result<SandboxHandle, SandboxError> {
        let state = self.decode(bytes)?;
        Self::wait(self.config.restore_ms);
        Ok(self.handle(state))
    }

    fn sample_descriptor(&self, rng: &mut dyn RngCore) -> ToolDescriptor {
        let path = ["a", "b", "c"][rng.gen_range(0..3)];
        let content = ["x", "y", ""][rng.gen_range(0..3)];
        let (name, args) = match rng.gen_range(0..5) {
            0 => ("write", json!({"path": path, "content": content})),
            1 => ("append", json!({"path": path, "content": content})),
            2 => ("rm", json!({"path": path})),
            3 => ("ls", json!({})),
            _ => ("read", json!({"path": path})),
        };
        self.describe(name, &args).expect("sampled args are well formed")
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tcg::{filter_stateful, Trajectory};

    fn call(b: &FileTreeBackend, h: &mut SandboxHandle, name: &str, args: Value) -> ToolResult {
        let d = b.describe(name, &args).unwrap();
        b.execute(h, &d).unwrap()
    }

    #[test]
    fn write_then_read() {
        let b = FileTreeBackend::default();
        let mut h = b.start().unwrap();
        call(&b, &mut h, "write", json!({"path": "foo", "content": "A"}));
        assert_eq!(call(&b, &mut h, "read", json!({"path": "foo"})).payload, b"A");
    }

    #[test]
    fn staleness_scenario_reads_differ() {
        let b = FileTreeBackend::default();
        let mut h = b.start().unwrap();
        call(&b, &mut h, "write", json!({"path": "foo", "content": "A"}));
        let first = call(&b, &mut h, "read", json!({"path": "foo"}));
        call(&b, &mut h, "append", json!({"path": "foo", "content": "B"}));
        let second = call(&b, &mut h, "read", json!({"path": "foo"}));
        assert_eq!(second.payload, b"AB");
        assert_ne!(first.payload, second.payload);
    }

    #[test]
    fn ls_and_missing_files() {
        let b = FileTreeBackend::default();
        let mut h = b.start().unwrap();
        assert_eq!(call(&b, &mut h, "ls", json!({})).payload, b"");
        let miss = call(&b, &mut h, "read", json!({"path": "nope"}));
        assert!(!miss.is_ok());
        assert_eq!(miss.payload, b"no such file");
        call(&b, &mut h, "write", json!({"path": "z", "content": ""}));
        call(&b, &mut h, "write", json!({"path": "a/b", "content": ""}));
        assert_eq!(call(&b, &mut h, "ls", json!({})).payload, b"a/b\nz");
        assert!(call(&b, &mut h, "rm", json!({"path": "z"})).is_ok());
        assert!(!call(&b, &mut h, "rm", json!({"path": "z"})).is_ok());
    }

    #[test]
    fn statefulness_annotation() {
        let b = FileTreeBackend::default();
        for (name, m) in [("write", true), ("append", true), ("rm", true), ("read", false), ("ls", false), ("sleep_ms", false)] {
            let d = ToolDescriptor::new(name, "{}", false).unwrap();
            assert_eq!(b.will_mutate_state(&d), m, "{name}");
        }
    }

    #[test]
    fn malformed_and_dead() {
        let b = FileTreeBackend::default();
        let mut h = b.start().unwrap();
        let bad = ToolDescriptor::new("write", "{\"path\":\"a\"}", true).unwrap();
        assert!(matches!(b.execute(&mut h, &bad), Err(SandboxError::MalformedArgs(_))));
        let unknown = ToolDescriptor::new("cat", "{}", false).unwrap();
        assert!(matches!(b.execute(&mut h, &unknown), Err(SandboxError::MalformedArgs(_))));
        b.stop(&mut h);
        let ls = b.describe("ls", &json!({})).unwrap();
        assert!(matches!(b.execute(&mut h, &ls), Err(SandboxError::Dead(_))));
        assert!(matches!(b.fork(&h), Err(SandboxError::Dead(_))));
    }

    #[test]
    fn fork_isolation() {
        let b = FileTreeBackend::default();
        let mut parent = b.start().unwrap();
        call(&b, &mut parent, "write", json!({"path": "f", "content": "p"}));
        let mut child = b.fork(&parent).unwrap();
        call(&b, &mut child, "write", json!({"path": "f", "content": "c"}));
        assert_eq!(call(&b, &mut parent, "read", json!({"path": "f"})).payload, b"p");
        assert_eq!(call(&b, &mut child, "read", json!({"path": "f"})).payload, b"c");
    }

    #[test]
    fn fork_chain_differs_exactly_where_written() {
        let b = FileTreeBackend::default();
        let mut handles = vec![b.start().unwrap()];
        let mut oracle: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
        for k in 1..6 {
            let mut next = b.fork(handles.last().unwrap()).unwrap();
            let mut model = oracle.last().unwrap().clone();
            let path = format!("f{}", k % 3);
            call(&b, &mut next, "write", json!({"path": path, "content": k.to_string()}));
            model.insert(path, k.to_string());
            handles.push(next);
            oracle.push(model);
        }
        for i in 0..handles.len() {
            for j in 0..handles.len() {
                let same_state = b.snapshot(&handles[i]).unwrap() == b.snapshot(&handles[j]).unwrap();
                assert_eq!(same_state, oracle[i] == oracle[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let b = FileTreeBackend::default();
        let mut h = b.start().unwrap();
        call(&b, &mut h, "write", json!({"path": "é", "content": "ü\n"}));
        let bytes = b.snapshot(&h).unwrap();
        let mut r = b.restore(&bytes).unwrap();
        assert_eq!(b.snapshot(&r).unwrap(), bytes);
        assert_eq!(call(&b, &mut r, "read", json!({"path": "é"})).payload, "ü\n".as_bytes());
        assert!(b.restore(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn seed_state_is_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seed.json");
        std::fs::write(&path, r#"{"README": "hi", "src/main.py": "print(1)"}"#).unwrap();
        let b = FileTreeBackend::seed_from_file(FileTreeConfig::default(), &path).unwrap();
        let mut h = b.start().unwrap();
        assert_eq!(call(&b, &mut h, "ls", json!({})).payload, b"README\nsrc/main.py");
    }

    #[test]
    fn sleep_ms_measures_wall_time() {
        let b = FileTreeBackend::default();
        let mut h = b.start().unwrap();
        for d in [5.0, 20.0] {
            let r = call(&b, &mut h, "sleep_ms", json!({"ms": d}));
            assert!(r.exec_ms >= d && r.exec_ms <= d + 50.0, "{}", r.exec_ms);
        }
    }

    #[test]
    fn broken_read_changes_snapshot() {
        let b = FileTreeBackend::broken_read();
        let mut h = b.start().unwrap();
        let before = b.snapshot(&h).unwrap();
        let d = b.describe("read", &json!({"path": "a"})).unwrap();
        assert!(!d.mutates_state());
        b.execute(&mut h, &d).unwrap();
        assert_ne!(b.snapshot(&h).unwrap(), before);
    }

    fn alphabet(b: &FileTreeBackend) -> Vec<ToolDescriptor> {
        vec![
            b.describe("write", &json!({"path": "f", "content": "x"})).unwrap(),
            b.describe("append", &json!({"path": "f", "content": "y"})).unwrap(),
            b.describe("read", &json!({"path": "f"})).unwrap(),
        ]
    }

    fn run(b: &FileTreeBackend, q: &Trajectory) -> Vec<u8> {
        let mut h = b.start().unwrap();
        for step in q.steps() {
            b.execute(&mut h, step).unwrap();
        }
        b.snapshot(&h).unwrap()
    }

    /// Executing P and its stateful filter from the same start gives the same
    /// bytes, for every P of length <= 6 over a 3-tool alphabet.
    #[test]
    fn stateful_filter_preserves_state_exhaustively() {
        let b = FileTreeBackend::default();
        let tools = alphabet(&b);
        let mut checked = 0;
        for len in 0..=6u32 {
            for code in 0..3usize.pow(len) {
                let mut c = code;
                let q: Trajectory = (0..len)
                    .map(|_| {
                        let t = tools[c % 3].clone();
                        c /= 3;
                        t
                    })
                    .collect();
                assert_eq!(run(&b, &q), run(&b, &filter_stateful(&q)));
                checked += 1;
            }
        }
        assert_eq!(checked, (0..=6).map(|l| 3usize.pow(l)).sum::<usize>());
    }

    proptest! {
        #[test]
        fn restore_preserves_future_results(seed in any::<u64>()) {
            let b = FileTreeBackend::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut h = b.start().unwrap();
            for _ in 0..rng.gen_range(0..10) {
                let d = b.sample_descriptor(&mut rng);
                b.execute(&mut h, &d).unwrap();
            }
            let mut restored = b.restore(&b.snapshot(&h).unwrap()).unwrap();
            for _ in 0..10 {
                let d = b.sample_descriptor(&mut rng);
                let x = b.execute(&mut h, &d).unwrap();
                let y = b.execute(&mut restored, &d).unwrap();
                prop_assert!(x.same_value(&y));
            }
        }
    }
}
