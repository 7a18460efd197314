//! The sandbox lifecycle contract and the in-process reference backends.

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::RngCore;
use serde_json::Value;

use crate::tcg::{ToolDescriptor, ToolResult};

mod contract;
mod file_tree;
mod query;

pub use contract::{contract_suite, ContractReport, PropertyReport};
pub use file_tree::{FileTreeBackend, FileTreeConfig, BROKEN_READ_KIND, FILE_TREE_KIND};
pub use query::{Cell, QueryBackend, Row, QUERY_KIND};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SandboxError {
    #[error("sandbox {0} is stopped")]
    Dead(u64),
    #[error("malformed arguments: {0}")]
    MalformedArgs(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("handle of kind {found} passed to {expected} backend")]
    WrongBackend { expected: String, found: String },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

static NEXT_HANDLE: AtomicU64 = AtomicU64::new(1);

/// A live execution environment. Owned by one rollout at a time.
pub struct SandboxHandle {
    id: u64,
    kind: Arc<str>,
    alive: bool,
    state: Box<dyn Any + Send + Sync>,
}

impl std::fmt::Debug for SandboxHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SandboxHandle").field("id", &self.id).field("kind", &self.kind).field("alive", &self.alive).finish()
    }
}

impl SandboxHandle {
    /// Wraps backend-private state in a fresh handle.
    pub fn new(kind: Arc<str>, state: Box<dyn Any + Send + Sync>) -> Self {
        Self { id: NEXT_HANDLE.fetch_add(1, Ordering::Relaxed), kind, alive: true, state }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    pub fn mark_stopped(&mut self) {
        self.alive = false;
    }

    /// Backend-private state, checked for liveness and type.
    pub fn state<T: 'static>(&self, expected: &str) -> Result<&T, SandboxError> {
        if !self.alive {
            return Err(SandboxError::Dead(self.id));
        }
        self.state.downcast_ref::<T>().ok_or_else(|| self.wrong(expected))
    }

    pub fn state_mut<T: 'static>(&mut self, expected: &str) -> Result<&mut T, SandboxError> {
        if !self.alive {
            return Err(SandboxError::Dead(self.id));
        }
        let found = self.kind.clone();
        self.state
            .downcast_mut::<T>()
            .ok_or_else(|| SandboxError::WrongBackend { expected: expected.to_string(), found: found.to_string() })
    }

    fn wrong(&self, expected: &str) -> SandboxError {
        SandboxError::WrongBackend { expected: expected.to_string(), found: self.kind.to_string() }
    }
}

/// start/stop/fork/execute plus statefulness annotation and snapshotting.
///
/// Implementations must give forks copy semantics, execute
/// deterministically, and make `restore(snapshot(h))` equivalent to
/// `fork(h)`.
pub trait Backend: Send + Sync + 'static {
    fn kind(&self) -> &str;
    fn start(&self) -> Result<SandboxHandle, SandboxError>;
    fn stop(&self, handle: &mut SandboxHandle) {
        handle.mark_stopped();
    }
    fn fork(&self, handle: &SandboxHandle) -> Result<SandboxHandle, SandboxError>;
    fn execute(&self, handle: &mut SandboxHandle, descriptor: &ToolDescriptor) -> Result<ToolResult, SandboxError>;
    fn will_mutate_state(&self, descriptor: &ToolDescriptor) -> bool;
    fn snapshot(&self, handle: &SandboxHandle) -> Result<Vec<u8>, SandboxError>;
    fn restore(&self, bytes: &[u8]) -> Result<SandboxHandle, SandboxError>;

    /// A random well-formed tool call, used by the contract suite.
    fn sample_descriptor(&self, rng: &mut dyn RngCore) -> ToolDescriptor;

    /// Descriptor for `name(args)` with the statefulness flag this backend
    /// reports for it.
    fn describe(&self, name: &str, args: &Value) -> Result<ToolDescriptor, SandboxError> {
        let probe = ToolDescriptor::from_args(name, args, false).map_err(|e| SandboxError::MalformedArgs(e.to_string()))?;
        let mutates = self.will_mutate_state(&probe);
        ToolDescriptor::from_args(name, args, mutates).map_err(|e| SandboxError::MalformedArgs(e.to_string()))
    }
}

/// Backends by kind string.
#[derive(Default, Clone)]
pub struct Registry {
    backends: BTreeMap<String, Arc<dyn Backend>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The reference backends with default configuration.
    pub fn with_reference_backends() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(FileTreeBackend::default()));
        r.register(Arc::new(FileTreeBackend::broken_read()));
        r.register(Arc::new(QueryBackend::default()));
        r
    }

    pub fn register(&mut self, backend: Arc<dyn Backend>) {
        self.backends.insert(backend.kind().to_string(), backend);
    }

    pub fn get(&self, kind: &str) -> Option<Arc<dyn Backend>> {
        self.backends.get(kind).cloned()
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }
}

/// Waits for `d` accurately: sleeps for most of it, then spins the rest so
/// coarse timer granularity does not inflate short waits.
pub fn precise_wait(d: Duration) {
    let deadline = Instant::now() + d;
    const SPIN: Duration = Duration::from_micros(1500);
    if d > SPIN {
        std::thread::sleep(d - SPIN);
    }
    while Instant::now() < deadline {
        std::thread::yield_now();
    }
}

pub(crate) fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

pub(crate) fn arg_str<'a>(args: &'a Value, key: &str) -> Result<&'a str, SandboxError> {
    args.get(key).and_then(Value::as_str).ok_or_else(|| SandboxError::MalformedArgs(format!("missing string field {key:?}")))
}

/// Optional non-negative `ms` cost argument.
pub(crate) fn arg_ms(args: &Value) -> Result<Option<f64>, SandboxError> {
    match args.get("ms") {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match v.as_f64() {
            Some(ms) if ms.is_finite() && ms >= 0.0 => Ok(Some(ms)),
            _ => Err(SandboxError::MalformedArgs(format!("bad ms value {v}"))),
        },
    }
}

pub(crate) fn parse_args(descriptor: &ToolDescriptor) -> Result<Value, SandboxError> {
    if descriptor.args_canonical().is_empty() {
        return Ok(Value::Object(Default::default()));
    }
    descriptor.args().ok_or_else(|| SandboxError::MalformedArgs(format!("arguments are not JSON: {}", descriptor.args_canonical())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precise_wait_is_not_short() {
        for ms in [0u64, 1, 3, 12] {
            let t = Instant::now();
            precise_wait(Duration::from_millis(ms));
            let got = t.elapsed();
            assert!(got >= Duration::from_millis(ms));
            assert!(got < Duration::from_millis(ms + 50));
        }
    }

    #[test]
    fn registry_lists_reference_backends() {
        let r = Registry::with_reference_backends();
        assert_eq!(r.kinds().collect::<Vec<_>>(), vec![BROKEN_READ_KIND, FILE_TREE_KIND, QUERY_KIND]);
        assert!(r.get("docker").is_none());
    }
}
