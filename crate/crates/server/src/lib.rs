//! HTTP API over the session engine, analytics and access control.

pub mod config;
pub mod error;
pub mod routes;
pub mod state;

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;

pub use config::Config;
pub use routes::router;
pub use state::{AppState, StartupError};

/// Binds the configured address, naming it in the error when it is taken.
pub async fn bind(addr: &str) -> Result<TcpListener, StartupError> {
    TcpListener::bind(addr).await.map_err(|source| StartupError::Bind { addr: addr.to_owned(), source })
}

/// Serves until `shutdown` resolves, then lets in-flight requests finish.
/// Stale sessions are swept on the configured interval.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), StartupError> {
    let sweeper = {
        let state = state.clone();
        let every = Duration::from_secs(state.config.sweep_interval_secs);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let st = state.clone();
                let ended = tokio::task::spawn_blocking(move || st.hub.sweep_stale()).await.unwrap_or_default();
                if !ended.is_empty() {
                    tracing::info!(count = ended.len(), "auto-ended stale sessions");
                }
            }
        })
    };
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    result.map_err(StartupError::Serve)
}
