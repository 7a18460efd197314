//! Synthetic rollout workloads.
//!
//! Every task has a spine of tool calls. A rollout follows the spine until
//! it diverges, which happens independently at each step with probability
//! `branch_prob`; from then on each step is drawn from `alternatives`
//! choices per position. The choice set is small and fixed, so the graph of
//! a task fills in over epochs and hit rates rise.
//!
//! A step is fully determined by `(seed, task, position, choice)`, including
//! its simulated cost, so equal descriptors always cost the same.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use tvcache_core::cache::MatchMode;
use tvcache_core::sandbox::{Backend, FileTreeBackend};
use tvcache_core::tcg::{fnv1a64, ToolDescriptor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LenRange {
    pub min: usize,
    pub max: usize,
}

/// One component of a tool cost mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostComponent {
    pub weight: f64,
    pub ms: f64,
}

/// Discrete mixture of sleep durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostMix(pub Vec<CostComponent>);

impl CostMix {
    pub fn free() -> Self {
        Self(vec![CostComponent { weight: 1.0, ms: 0.0 }])
    }

    /// `p` of `fast_ms`, the rest `slow_ms`.
    pub fn bimodal(p: f64, fast_ms: f64, slow_ms: f64) -> Self {
        Self(vec![CostComponent { weight: p, ms: fast_ms }, CostComponent { weight: 1.0 - p, ms: slow_ms }])
    }

    fn total_weight(&self) -> f64 {
        self.0.iter().map(|c| c.weight).sum()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().map(|c| c.weight * c.ms).sum::<f64>() / self.total_weight()
    }

    /// Lower quantile `p` of the mixture.
    pub fn quantile(&self, p: f64) -> f64 {
        let mut parts = self.0.clone();
        parts.sort_by(|a, b| a.ms.total_cmp(&b.ms));
        let total = self.total_weight();
        let mut acc = 0.0;
        for c in &parts {
            acc += c.weight / total;
            if acc >= p - 1e-12 {
                return c.ms;
            }
        }
        parts.last().map_or(0.0, |c| c.ms)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let mut x = rng.gen::<f64>() * self.total_weight();
        for c in &self.0 {
            if x < c.weight {
                return c.ms;
            }
            x -= c.weight;
        }
        self.0.last().map_or(0.0, |c| c.ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub tasks: usize,
    pub rollouts_per_task: usize,
    pub epochs: usize,
    /// Per-task trajectory length, uniform over the inclusive range.
    pub trajectory_len: LenRange,
    pub branch_prob: f64,
    pub tool_cost: CostMix,
    pub stateless_frac: f64,
    /// Choices per position once a rollout has diverged.
    pub alternatives: usize,
    pub mode: MatchMode,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            tasks: 4,
            rollouts_per_task: 8,
            epochs: 1,
            trajectory_len: LenRange { min: 4, max: 12 },
            branch_prob: 0.15,
            tool_cost: CostMix::free(),
            stateless_frac: 0.3,
            alternatives: 3,
            mode: MatchMode::Strict,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid workload spec: {0}")]
pub struct SpecError(pub String);

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(SpecError(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        prob("branch_prob", self.branch_prob)?;
        prob("stateless_frac", self.stateless_frac)?;
        if self.tasks == 0 || self.rollouts_per_task == 0 || self.epochs == 0 {
            return Err(SpecError("tasks, rollouts_per_task and epochs must be positive".into()));
        }
        if self.trajectory_len.min == 0 || self.trajectory_len.min > self.trajectory_len.max {
            return Err(SpecError(format!("bad trajectory_len {:?}", self.trajectory_len)));
        }
        if self.alternatives < 2 {
            return Err(SpecError("alternatives must be at least 2".into()));
        }
        if self.tool_cost.0.is_empty()
            || self.tool_cost.0.iter().any(|c| !(c.weight >= 0.0 && c.ms >= 0.0 && c.ms.is_finite()))
            || self.tool_cost.total_weight() <= 0.0
        {
            return Err(SpecError("tool_cost needs non-negative weights and durations".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| SpecError(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub task: usize,
    pub epoch: usize,
    pub index: usize,
    /// First position that left the spine; equals the length if none did.
    pub divergence: usize,
    pub steps: Vec<ToolDescriptor>,
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkloadSpec,
    /// Ordered by epoch, then task, then rollout index.
    pub rollouts: Vec<Rollout>,
}

pub fn task_id(task: usize) -> String {
    format!("task-{task}")
}

impl Workload {
    /// Rollouts of one task in one epoch.
    pub fn batches(&self) -> impl Iterator<Item = &[Rollout]> {
        self.rollouts.chunks(self.spec.rollouts_per_task)
    }

    pub fn tool_calls(&self) -> usize {
        self.rollouts.iter().map(|r| r.steps.len()).sum()
    }
}

fn step_rng(seed: u64, task: usize, pos: usize, choice: usize) -> ChaCha8Rng {
    let key = format!("{seed}/{task}/{pos}/{choice}");
    ChaCha8Rng::seed_from_u64(fnv1a64(key.as_bytes()))
}

/// The descriptor at `pos` for `choice` (0 is the spine).
pub fn step(spec: &WorkloadSpec, task: usize, pos: usize, choice: usize) -> ToolDescriptor {
    let mut rng = step_rng(spec.seed, task, pos, choice);
    let ms = spec.tool_cost.sample(&mut rng);
    let path = ["a", "b", "c"][rng.gen_range(0..3)];
    let tag = format!("{pos}.{choice}");
    let (name, mut args) = if rng.gen_bool(spec.stateless_frac) {
        if rng.gen_bool(0.5) {
            ("read", json!({"path": path}))
        } else {
            ("ls", json!({}))
        }
    } else if rng.gen_bool(0.5) {
        ("write", json!({"path": path, "content": tag}))
    } else {
        ("append", json!({"path": path, "content": tag}))
    };
    args["v"] = Value::String(tag);
    if ms > 0.0 {
        args["ms"] = json!(ms);
    }
    FileTreeBackend::default().describe(name, &args).expect("generated args are well formed")
}

/// Deterministic under `spec.seed`.
pub fn generate(spec: &WorkloadSpec) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lens: Vec<usize> =
        (0..spec.tasks).map(|_| rng.gen_range(spec.trajectory_len.min..=spec.trajectory_len.max)).collect();
    let mut rollouts = Vec::with_capacity(spec.tasks * spec.rollouts_per_task * spec.epochs);
    for epoch in 0..spec.epochs {
        for (task, &len) in lens.iter().enumerate() {
            for index in 0..spec.rollouts_per_task {
                let divergence = (0..len).find(|_| rng.gen_bool(spec.branch_prob)).unwrap_or(len);
                let steps = (0..len)
                    .map(|pos| {
                        let choice = match pos.cmp(&divergence) {
                            std::cmp::Ordering::Less => 0,
                            std::cmp::Ordering::Equal => rng.gen_range(1..spec.alternatives),
                            std::cmp::Ordering::Greater => rng.gen_range(0..spec.alternatives),
                        };
                        step(spec, task, pos, choice)
                    })
                    .collect();
                rollouts.push(Rollout { task, epoch, index, divergence, steps });
            }
        }
    }
    Workload { spec: spec.clone(), rollouts }
}

/// Descriptor with the `ms` cost argument removed; executes to the same
/// value without the wait.
pub fn without_cost(d: &ToolDescriptor) -> ToolDescriptor {
    match d.args() {
        Some(Value::Object(mut m)) if m.contains_key("ms") => {
            m.remove("ms");
            ToolDescriptor::from_args(d.tool_name(), &Value::Object(m), d.mutates_state()).expect("valid descriptor")
        }
        _ => d.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(branch_prob: f64) -> WorkloadSpec {
        WorkloadSpec { branch_prob, seed: 7, ..Default::default() }
    }

    #[test]
    fn same_seed_same_workload() {
        let a = generate(&spec(0.3));
        let b = generate(&spec(0.3));
        assert_eq!(a.rollouts, b.rollouts);
        let c = generate(&WorkloadSpec { seed: 8, ..spec(0.3) });
        assert_ne!(a.rollouts, c.rollouts);
    }

    #[test]
    fn no_branching_means_identical_rollouts() {
        let w = generate(&spec(0.0));
        for batch in w.batches() {
            assert!(batch.iter().all(|r| r.steps == batch[0].steps));
        }
    }

    #[test]
    fn certain_branching_shares_nothing() {
        let w = generate(&spec(1.0));
        for r in &w.rollouts {
            assert_eq!(r.divergence, 0);
            assert_ne!(r.steps[0], step(&w.spec, r.task, 0, 0));
        }
    }

    #[test]
    fn steps_are_determined_by_position_and_choice() {
        let s = spec(0.5);
        assert_eq!(step(&s, 1, 2, 1), step(&s, 1, 2, 1));
        let distinct: HashSet<_> = (0..3).map(|c| step(&s, 1, 2, c)).collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn validation() {
        assert!(spec(0.1).validate().is_ok());
        assert!(spec(1.5).validate().is_err());
        assert!(WorkloadSpec { alternatives: 1, ..spec(0.1) }.validate().is_err());
        assert!(WorkloadSpec { trajectory_len: LenRange { min: 3, max: 2 }, ..spec(0.1) }.validate().is_err());
        assert!(WorkloadSpec::from_json(r#"{"tasks": 2, "bogus": 1}"#).is_err());
        let parsed = WorkloadSpec::from_json(r#"{"tasks": 2, "tool_cost": [{"weight": 1, "ms": 5}]}"#).unwrap();
        assert_eq!(parsed.tasks, 2);
        assert_eq!(parsed.tool_cost.mean(), 5.0);
    }

    #[test]
    fn cost_mix_moments() {
        let m = CostMix::bimodal(0.8, 5.0, 2000.0);
        assert!((m.mean() - 404.0).abs() < 1e-9);
        assert_eq!(m.quantile(0.5), 5.0);
        assert_eq!(m.quantile(0.8), 5.0);
        assert_eq!(m.quantile(0.81), 2000.0);
    }

    #[test]
    fn stripping_cost_keeps_other_args() {
        let s = WorkloadSpec { tool_cost: CostMix::bimodal(0.5, 5.0, 7.0), ..spec(0.1) };
        let d = step(&s, 0, 0, 0);
        let bare = without_cost(&d);
        assert!(d.args().unwrap().get("ms").is_some());
        assert!(bare.args().unwrap().get("ms").is_none());
        assert_eq!(bare.tool_name(), d.tool_name());
        assert_eq!(bare.mutates_state(), d.mutates_state());
    }
}
