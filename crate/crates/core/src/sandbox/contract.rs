//! Conformance checks any backend must pass before it is used with the cache.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, SandboxError, SandboxHandle};
use crate::tcg::ToolDescriptor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub name: String,
    pub checks: u64,
    pub violations: u64,
    pub first_failure: Option<String>,
}

impl PropertyReport {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), checks: 0, violations: 0, first_failure: None }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    fn check(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.violations += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(detail());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractReport {
    pub backend_kind: String,
    pub workloads: u64,
    pub ops_per_workload: u64,
    pub properties: Vec<PropertyReport>,
}

impl ContractReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyReport::passed)
    }
}

struct Suite {
    flag: PropertyReport,
    stateless: PropertyReport,
    isolation: PropertyReport,
    determinism: PropertyReport,
    restore: PropertyReport,
    lifecycle: PropertyReport,
}

/// Runs `workloads` random workloads of `ops` calls each against `backend`.
/// Backend failures are recorded as violations, never returned.
pub fn contract_suite(backend: &dyn Backend, workloads: u64, ops: u64, seed: u64) -> ContractReport {
    let mut s = Suite {
        flag: PropertyReport::new("descriptor_flag_matches_will_mutate_state"),
        stateless: PropertyReport::new("stateless_tools_leave_snapshot_unchanged"),
        isolation: PropertyReport::new("fork_isolation"),
        determinism: PropertyReport::new("deterministic_execute"),
        restore: PropertyReport::new("restore_equivalent_to_fork"),
        lifecycle: PropertyReport::new("stopped_handle_rejects_operations"),
    };
    for w in 0..workloads {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(w));
        if let Err(e) = run_workload(backend, &mut rng, ops, &mut s) {
            s.lifecycle.check(false, || format!("workload {w}: backend error {e}"));
        }
    }
    ContractReport {
        backend_kind: backend.kind().to_string(),
        workloads,
        ops_per_workload: ops,
        properties: vec![s.flag, s.stateless, s.isolation, s.determinism, s.restore, s.lifecycle],
    }
}

fn exec(backend: &dyn Backend, h: &mut SandboxHandle, d: &ToolDescriptor) -> Result<(Vec<u8>, bool), SandboxError> {
    let r = backend.execute(h, d)?;
    let ok = r.is_ok();
    Ok((r.payload, ok))
}

fn run_workload(backend: &dyn Backend, rng: &mut ChaCha8Rng, ops: u64, s: &mut Suite) -> Result<(), SandboxError> {
    let mut h = backend.start()?;
    for op in 0..ops {
        let d = backend.sample_descriptor(rng);
        s.flag.check(d.mutates_state() == backend.will_mutate_state(&d), || format!("op {op}: {d} flag disagrees"));

        let before = backend.snapshot(&h)?;
        // Every few ops fork and compare the two copies on the same call.
        if rng.gen_bool(0.25) {
            let mut twin = backend.fork(&h)?;
            let mut restored = backend.restore(&before)?;
            s.restore.check(backend.snapshot(&restored)? == before, || format!("op {op}: restore(snapshot) differs"));
            let a = exec(backend, &mut h, &d)?;
            let b = exec(backend, &mut twin, &d)?;
            let c = exec(backend, &mut restored, &d)?;
            s.determinism.check(a == b, || format!("op {op}: {d} gave different results on a fork"));
            s.restore.check(a == c, || format!("op {op}: {d} differs after restore"));
            let after = backend.snapshot(&h)?;
            s.determinism.check(backend.snapshot(&twin)? == after, || format!("op {op}: fork state diverged"));

            // Mutate the twin; the original must not see it.
            let m = backend.sample_descriptor(rng);
            exec(backend, &mut twin, &m)?;
            s.isolation.check(backend.snapshot(&h)? == after, || format!("op {op}: {m} on a fork leaked into parent"));
            backend.stop(&mut twin);
            backend.stop(&mut restored);
            if !d.mutates_state() {
                s.stateless.check(after == before, || format!("op {op}: stateless {d} changed state"));
            }
        } else {
            exec(backend, &mut h, &d)?;
            if !d.mutates_state() {
                let after = backend.snapshot(&h)?;
                s.stateless.check(after == before, || format!("op {op}: stateless {d} changed state"));
            }
        }
    }
    let probe = backend.sample_descriptor(rng);
    backend.stop(&mut h);
    s.lifecycle.check(matches!(backend.execute(&mut h, &probe), Err(SandboxError::Dead(_))), || "execute on stopped handle".into());
    s.lifecycle.check(matches!(backend.fork(&h), Err(SandboxError::Dead(_))), || "fork of stopped handle".into());
    s.lifecycle.check(matches!(backend.snapshot(&h), Err(SandboxError::Dead(_))), || "snapshot of stopped handle".into());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::{FileTreeBackend, QueryBackend};

    #[test]
    fn file_tree_passes() {
        let r = contract_suite(&FileTreeBackend::default(), 20, 200, 7);
        assert!(r.passed(), "{r:#?}");
        assert!(r.properties.iter().all(|p| p.checks > 0), "{r:#?}");
    }

    #[test]
    fn query_passes() {
        let r = contract_suite(&QueryBackend::default().with_latency(0.0), 5, 200, 7);
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn broken_read_fails_statelessness_only() {
        let r = contract_suite(&FileTreeBackend::broken_read(), 3, 50, 7);
        assert!(!r.passed());
        for p in &r.properties {
            let expect_fail = p.name == "stateless_tools_leave_snapshot_unchanged";
            assert_eq!(!p.passed(), expect_fail, "{p:?}");
        }
    }
}
