//! [`ToolCache`] over HTTP, routing each task to its shard.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;

use tvcache_core::cache::{CacheError, EvictedSnapshot, MatchMode, PutOutcome, ToolCache};
use tvcache_core::forkpool::PoolStats;
use tvcache_core::snapshot::SnapshotRef;
use tvcache_core::tcg::{LeaseId, PrefixMatch, ToolResult, Trajectory};

use crate::shard::ShardStats;
use crate::wire::{
    shard_for, ErrorBody, GetResponse, LookupRequest, PersistReport, PoolReport, PrefixMatchResponse, PutRequest,
    PutResponse, ReleaseRequest, ReleaseResponse, KEY_HEADER,
};

pub struct HttpCache {
    endpoints: Vec<String>,
    agent: ureq::Agent,
    retries: u32,
}

impl HttpCache {
    /// `endpoints[i]` is the base URL of shard `i`.
    pub fn new(endpoints: Vec<String>, timeout: Duration, retries: u32) -> Self {
        assert!(!endpoints.is_empty(), "at least one shard endpoint");
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        let endpoints = endpoints.into_iter().map(|e| e.trim_end_matches('/').to_string()).collect();
        Self { endpoints, agent, retries }
    }

    pub fn single(endpoint: impl Into<String>) -> Self {
        Self::new(vec![endpoint.into()], Duration::from_secs(10), 1)
    }

    pub fn endpoints(&self) -> &[String] {
        &self.endpoints
    }

    pub fn endpoint_for(&self, task_id: &str) -> &str {
        &self.endpoints[shard_for(task_id, self.endpoints.len())]
    }

    fn send<B: Serialize>(&self, method: &str, url: &str, body: Option<&B>) -> Result<(u16, Vec<u8>), CacheError> {
        let mut last = String::new();
        for _ in 0..=self.retries {
            let sent = match (method, body) {
                ("POST", Some(b)) => self.agent.post(url).send_json(b),
                ("PUT", Some(b)) => self.agent.put(url).send_json(b),
                ("POST", None) => self.agent.post(url).send_empty(),
                _ => self.agent.get(url).call(),
            };
            match sent {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let bytes = resp.body_mut().read_to_vec().map_err(|e| CacheError::Unavailable(e.to_string()))?;
                    return Ok((status, bytes));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(CacheError::Unavailable(format!("{url}: {last}")))
    }

    fn call<B: Serialize, T: DeserializeOwned>(&self, method: &str, url: &str, body: &B) -> Result<T, CacheError> {
        let (status, bytes) = self.send(method, url, Some(body))?;
        if status == 200 {
            return serde_json::from_slice(&bytes).map_err(|e| CacheError::Invalid(format!("bad response: {e}")));
        }
        let detail = serde_json::from_slice::<ErrorBody>(&bytes)
            .map(|b| b.error)
            .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
        Err(match status {
            409 => CacheError::MissingPrefix { matched: 0, expected: 0 },
            404 => CacheError::UnknownLease(detail),
            410 => CacheError::LeaseExpired(detail),
            400 => CacheError::Invalid(detail),
            _ => CacheError::Unavailable(format!("status {status}: {detail}")),
        })
    }

    /// Exact lookup through the `GET /get` alias.
    pub fn get_via_alias(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<Option<ToolResult>, CacheError> {
        let mode = serde_json::to_value(mode).expect("mode serializes");
        let url = format!(
            "{}/get?task_id={}&key_hash={:016x}&mode={}",
            self.endpoint_for(task_id),
            encode_query(task_id),
            q.key_hash(),
            mode.as_str().unwrap_or("strict")
        );
        let resp = self.agent.get(&url).header(KEY_HEADER, B64.encode(q.encode())).call();
        let mut resp = resp.map_err(|e| CacheError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let bytes = resp.body_mut().read_to_vec().map_err(|e| CacheError::Unavailable(e.to_string()))?;
        if status != 200 {
            return Err(CacheError::Invalid(String::from_utf8_lossy(&bytes).into_owned()));
        }
        let r: GetResponse = serde_json::from_slice(&bytes).map_err(|e| CacheError::Invalid(e.to_string()))?;
        Ok(r.result)
    }

    pub fn stats(&self, shard: usize) -> Result<ShardStats, CacheError> {
        let (status, bytes) = self.send::<()>("GET", &format!("{}/stats", self.endpoints[shard]), None)?;
        if status != 200 {
            return Err(CacheError::Unavailable(format!("status {status}")));
        }
        serde_json::from_slice(&bytes).map_err(|e| CacheError::Invalid(e.to_string()))
    }

    /// DOT text of a task's graph, or None for an unknown task.
    pub fn graph(&self, task_id: &str) -> Result<Option<String>, CacheError> {
        let url = format!("{}/graph?task_id={}", self.endpoint_for(task_id), encode_query(task_id));
        let (status, bytes) = self.send::<()>("GET", &url, None)?;
        match status {
            200 => Ok(Some(String::from_utf8_lossy(&bytes).into_owned())),
            404 => Ok(None),
            s => Err(CacheError::Unavailable(format!("status {s}"))),
        }
    }

    pub fn persist_now(&self, shard: usize) -> Result<PersistReport, CacheError> {
        let (status, bytes) = self.send::<()>("POST", &format!("{}/persist_now", self.endpoints[shard]), None)?;
        if status != 200 {
            return Err(CacheError::Unavailable(format!("status {status}")));
        }
        serde_json::from_slice(&bytes).map_err(|e| CacheError::Invalid(e.to_string()))
    }

    /// Posts a fork pool's counters to every shard's stats.
    pub fn report_pool(&self, client_id: &str, stats: PoolStats) -> Result<(), CacheError> {
        let body = PoolReport { client_id: client_id.to_string(), stats };
        for e in &self.endpoints {
            self.send("POST", &format!("{e}/pool_stats"), Some(&body))?;
        }
        Ok(())
    }
}

fn encode_query(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl ToolCache for HttpCache {
    fn get(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<Option<ToolResult>, CacheError> {
        let body = LookupRequest { task_id: task_id.to_string(), trajectory: q.steps().to_vec(), mode };
        let r: GetResponse = self.call("POST", &format!("{}/get", self.endpoint_for(task_id)), &body)?;
        Ok(r.result)
    }

    fn prefix_match(&self, task_id: &str, q: &Trajectory, mode: MatchMode) -> Result<PrefixMatch, CacheError> {
        let body = LookupRequest { task_id: task_id.to_string(), trajectory: q.steps().to_vec(), mode };
        let r: PrefixMatchResponse = self.call("POST", &format!("{}/prefix_match", self.endpoint_for(task_id)), &body)?;
        Ok(r.into())
    }

    fn put(
        &self,
        task_id: &str,
        q: &Trajectory,
        result: &ToolResult,
        snapshot: Option<&SnapshotRef>,
        mode: MatchMode,
    ) -> Result<PutOutcome, CacheError> {
        let body = PutRequest {
            task_id: task_id.to_string(),
            trajectory: q.steps().to_vec(),
            result: result.clone(),
            snapshot: snapshot.cloned(),
            snapshot_id: None,
            mode,
        };
        let r: PutResponse = self.call("PUT", &format!("{}/put", self.endpoint_for(task_id)), &body)?;
        Ok(PutOutcome { node_id: r.node_id, created: r.created, snapshot_adopted: r.snapshot_adopted, evicted: r.evicted })
    }

    fn release(&self, task_id: &str, lease: &LeaseId) -> Result<Vec<EvictedSnapshot>, CacheError> {
        let body = ReleaseRequest { task_id: task_id.to_string(), lease_id: lease.clone() };
        let r: ReleaseResponse = self.call("POST", &format!("{}/release", self.endpoint_for(task_id)), &body)?;
        Ok(r.evicted)
    }
}
