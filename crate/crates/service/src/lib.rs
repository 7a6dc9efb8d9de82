//! HTTP/JSON service over the ddcs engine.
//!
//! One-shot endpoints run whole scenarios and work offline on exported state
//! bundles (grid verification, balance export, proofs, VO checks). Sessions
//! keep a live simulated world in memory and apply scenario steps as they
//! arrive.

use std::future::Future;
use std::io;
use std::net::SocketAddr;

use tokio::net::{TcpListener, ToSocketAddrs};
use tokio::task::JoinHandle;

pub mod api;
mod error;
mod routes;
mod sessions;

pub use ddcs_core as core;
pub use error::ApiError;
pub use routes::{router, AppState};
pub use sessions::MAX_SESSIONS;

/// Serves until `shutdown` resolves.
pub async fn serve(listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "ddcs service listening");
    }
    axum::serve(listener, router(AppState::default()))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves in a background task. Returns the bound address,
/// which is useful with port 0.
pub async fn spawn(addr: impl ToSocketAddrs) -> io::Result<(SocketAddr, JoinHandle<io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let task = tokio::spawn(serve(listener, std::future::pending()));
    Ok((local, task))
}
