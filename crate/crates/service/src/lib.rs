//! Live-run gateway: each session wraps one experiment run and streams it
//! over a WebSocket, pausing for operator input whenever the selector hands
//! an episode to the human in live mode.

pub mod app;
pub mod session;

use std::future::Future;
use std::sync::Arc;

use tokio::net::TcpListener;

pub use app::{router, AppState};
pub use session::{Session, SessionError, SessionSettings, Subscription};

pub async fn serve(listener: TcpListener, settings: SessionSettings) -> std::io::Result<()> {
    serve_until(listener, settings, std::future::pending()).await
}

pub async fn serve_until(
    listener: TcpListener,
    settings: SessionSettings,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(Arc::new(AppState::new(settings)));
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
