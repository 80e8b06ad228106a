//! Websocket front end: one [`Session`] per connection, ticked at the
//! configured rate.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::time::MissedTickBehavior;

use crate::protocol::ServerMsg;
use crate::session::{Session, Shared};

#[derive(Clone)]
struct AppState {
    shared: Arc<Shared>,
    seed: u64,
    connections: Arc<AtomicU64>,
}

/// Routes: `/ws` for sessions, `/robot` for the chain and rule set the
/// console draws.
pub fn router(shared: Arc<Shared>, seed: u64) -> Router {
    let state = AppState { shared, seed, connections: Arc::new(AtomicU64::new(0)) };
    Router::new().route("/ws", get(upgrade)).route("/robot", get(describe)).with_state(state)
}

pub async fn serve(listener: TcpListener, shared: Arc<Shared>, seed: u64) -> std::io::Result<()> {
    axum::serve(listener, router(shared, seed)).await
}

async fn describe(State(state): State<AppState>) -> impl IntoResponse {
    let chain: serde_json::Value = serde_json::from_str(&state.shared.robot.to_json()).unwrap_or_default();
    Json(serde_json::json!({
        "robot": chain,
        "rules": state.shared.rules.rules,
        "tick_hz": state.shared.tick_hz,
    }))
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    let n = state.connections.fetch_add(1, Ordering::Relaxed);
    let session = Session::new(Arc::clone(&state.shared), state.seed.wrapping_add(n));
    ws.on_upgrade(move |socket| run_session(socket, session))
}

async fn run_session(socket: WebSocket, mut session: Session) {
    let (mut tx, mut rx) = socket.split();
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(1.0 / session.shared().tick_hz));
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    loop {
        let replies = tokio::select! {
            incoming = rx.next() => match incoming {
                Some(Ok(Message::Text(text))) => session.handle_text(text.as_str()),
                Some(Ok(Message::Binary(_))) => vec![ServerMsg::Error { message: "binary frames are not supported".into() }],
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => continue,
            },
            _ = ticker.tick() => match session.tick() {
                Ok(msgs) => msgs,
                Err(e) => vec![ServerMsg::Error { message: e.to_string() }],
            },
        };
        for msg in replies {
            if tx.send(Message::Text(msg.to_line().into())).await.is_err() {
                return;
            }
        }
    }
}
