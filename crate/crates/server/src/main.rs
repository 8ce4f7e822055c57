use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use aba_core::time::SystemClock;
use aba_server::{bind, serve, AppState, Config};
use clap::Parser;

/// ABA therapy session server.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// TOML configuration file; ABA_* variables override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `bind` (host:port).
    #[arg(long)]
    bind: Option<String>,
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

async fn run(args: Args) -> Result<(), aba_server::StartupError> {
    let mut config = Config::load(args.config.as_deref())?;
    if let Some(b) = args.bind {
        config.bind = b;
        config.validate()?;
    }
    let listener = bind(&config.bind).await?;
    let state = AppState::open(config, Arc::new(SystemClock))?;
    tracing::info!(addr = %state.config.bind, version = env!("CARGO_PKG_VERSION"), "listening");
    serve(listener, state, shutdown_signal()).await
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_target(false).init();
    match run(Args::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aba-server: {e}");
            ExitCode::FAILURE
        }
    }
}
