use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use autonomy_core::harness::RunConfig;
use autonomy_core::protocol::{ErrorBody, HumanAction, LogFormat, ModeRequest, SessionCreated};
use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::session::{Session, SessionError, SessionSettings, Subscription};

#[derive(Default)]
pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    settings: SessionSettings,
}

impl AppState {
    pub fn new(settings: SessionSettings) -> Self {
        Self {
            sessions: RwLock::default(),
            settings,
        }
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("session table").get(id).cloned()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id/state", get(get_state))
        .route("/sessions/:id/action", post(post_action))
        .route("/sessions/:id/mode", post(set_mode))
        .route("/sessions/:id/events", get(events))
        .route("/sessions/:id/log", get(get_log))
        .with_state(state)
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                snapshot: None,
            },
        }
    }

    fn unknown(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session `{id}`"))
    }

    fn from_session(err: SessionError, session: &Session) -> Self {
        let status = match err {
            SessionError::Config(_) | SessionError::InvalidAction(_) => StatusCode::BAD_REQUEST,
            SessionError::Rejected(_) | SessionError::AlreadySubscribed => StatusCode::CONFLICT,
            SessionError::Closed => StatusCode::GONE,
        };
        let mut e = Self::new(status, err.to_string());
        e.body.snapshot = Some(Box::new((*session.snapshot()).clone()));
        e
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn lookup(state: &AppState, id: &str) -> Result<Arc<Session>, ApiError> {
    state.session(id).ok_or_else(|| ApiError::unknown(id))
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let config = RunConfig::from_json_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session::start(id.clone(), config, state.settings.clone())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    state.sessions.write().expect("session table").insert(id.clone(), session);
    tracing::info!(session = %id, "session created");
    Ok((StatusCode::CREATED, Json(SessionCreated { id })).into_response())
}

async fn get_state(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = lookup(&state, &id)?;
    let snap = session.snapshot();
    Ok(Json(&*snap).into_response())
}

async fn post_action(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let session = lookup(&state, &id)?;
    let action: HumanAction = parse_body(&body)?;
    let ack = session
        .post_action(action)
        .await
        .map_err(|e| ApiError::from_session(e, &session))?;
    Ok(Json(ack).into_response())
}

async fn set_mode(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let session = lookup(&state, &id)?;
    let req: ModeRequest = parse_body(&body)?;
    session.set_mode(req.mode);
    let mut snap = (*session.snapshot()).clone();
    snap.mode = req.mode;
    Ok(Json(snap).into_response())
}

#[derive(Deserialize)]
struct LogQuery {
    #[serde(default)]
    format: LogFormat,
}

async fn get_log(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<LogQuery>,
) -> Result<Response, ApiError> {
    let session = lookup(&state, &id)?;
    let content_type = match q.format {
        LogFormat::Episodes => "application/x-ndjson",
        LogFormat::Summary | LogFormat::Eval => "text/csv",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], session.log_text(q.format)).into_response())
}

async fn events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let session = lookup(&state, &id)?;
    let sub = session.subscribe().map_err(|e| ApiError::from_session(e, &session))?;
    Ok(ws.on_upgrade(move |socket| forward_events(socket, sub)))
}

async fn forward_events(mut socket: WebSocket, mut sub: Subscription) {
    loop {
        tokio::select! {
            ev = sub.next() => {
                let Some(ev) = ev else { break };
                let text = serde_json::to_string(&ev).expect("events serialize");
                let last = ev.is_terminal();
                if socket.send(Message::Text(text)).await.is_err() {
                    sub.return_event(ev);
                    break;
                }
                if last {
                    let _ = socket.send(Message::Close(None)).await;
                    break;
                }
            }
            msg = socket.recv() => match msg {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                Some(Ok(_)) => {}
            }
        }
    }
}
