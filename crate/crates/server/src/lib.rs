//! HTTP front end for the tool-value cache. Each shard is an independent
//! cache with its own listener and runtime thread; clients route tasks to
//! shards by `fnv1a64(task_id) % shard_count`.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

pub mod config;
pub mod golden;
pub mod http_cache;
pub mod shard;
pub mod wire;

pub use config::{ConfigError, ServerConfig};
pub use http_cache::HttpCache;
pub use shard::{router, ShardState, ShardStats};

const LEASE_SWEEP: Duration = Duration::from_secs(1);
const TICK: Duration = Duration::from_millis(50);

/// A running shard. Stopping it (or dropping it) shuts the listener down
/// and performs a final persistence pass.
pub struct ShardServer {
    addr: SocketAddr,
    state: Arc<ShardState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    server: Option<JoinHandle<()>>,
    stop_background: Arc<AtomicBool>,
    background: Option<JoinHandle<()>>,
}

impl ShardServer {
    /// Restores this shard's graphs, binds its address and starts serving.
    pub fn start(config: &ServerConfig, index: usize) -> std::io::Result<Self> {
        let state = Arc::new(ShardState::new(config, index)?);
        let restored = state.restore_all();
        let listener = std::net::TcpListener::bind(config.shard_addr(index))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        tracing::info!(shard = index, %addr, restored, "shard listening");

        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(state.clone());
        let server = std::thread::Builder::new().name(format!("tvc-shard-{index}")).spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("tokio runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener registers");
                let served = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = served.await {
                    tracing::error!(error = %e, "shard server failed");
                }
            });
        })?;

        let stop = Arc::new(AtomicBool::new(false));
        let background = {
            let (state, stop, interval) = (state.clone(), stop.clone(), config.persist_interval());
            std::thread::Builder::new().name(format!("tvc-shard-{index}-bg")).spawn(move || {
                let (mut last_sweep, mut last_persist) = (Instant::now(), Instant::now());
                while !stop.load(Ordering::Relaxed) {
                    std::thread::sleep(TICK);
                    if last_sweep.elapsed() >= LEASE_SWEEP {
                        state.expire_leases();
                        last_sweep = Instant::now();
                    }
                    if last_persist.elapsed() >= interval {
                        state.persist_dirty();
                        last_persist = Instant::now();
                    }
                }
            })?
        };

        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            server: Some(server),
            stop_background: stop,
            background: Some(background),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<ShardState> {
        &self.state
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.server.take() {
            let _ = h.join();
        }
        self.stop_background.store(true, Ordering::Relaxed);
        if let Some(h) = self.background.take() {
            let _ = h.join();
        }
        self.state.persist_dirty();
    }
}

impl Drop for ShardServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Starts every shard of `config`.
pub fn start_shards(config: &ServerConfig) -> Result<Vec<ShardServer>, ConfigError> {
    config.validate()?;
    (0..config.shard_count)
        .map(|i| ShardServer::start(config, i).map_err(|e| ConfigError::Invalid(format!("shard {i}: {e}"))))
        .collect()
}

/// Blocks until SIGINT or SIGTERM.
pub fn wait_for_shutdown_signal() {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("tokio runtime");
    rt.block_on(async {
        #[cfg(unix)]
        {
            use tokio::signal::unix::{signal, SignalKind};
            let mut term = signal(SignalKind::terminate()).expect("signal handler");
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        }
        #[cfg(not(unix))]
        let _ = tokio::signal::ctrl_c().await;
    });
}
