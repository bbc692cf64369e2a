//! Thin async client for the live-run service.

use autonomy_core::harness::RunConfig;
use autonomy_core::protocol::{
    ActionAck, ErrorBody, Event, HumanAction, LogFormat, Mode, ModeRequest, SessionCreated, SessionSnapshot,
};
use futures::StreamExt;
use reqwest::StatusCode;
use tokio_tungstenite::tungstenite::Message;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {}", body.error)]
    Api { status: StatusCode, body: ErrorBody },
    #[error("event channel: {0}")]
    Socket(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("malformed event frame: {0}")]
    Frame(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn decode<T: serde::de::DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            error: text,
            snapshot: None,
        });
        Err(ClientError::Api { status, body })
    }

    pub async fn create_session(&self, config: &RunConfig) -> Result<String> {
        let resp = self.http.post(self.url("/sessions")).json(config).send().await?;
        Ok(Self::decode::<SessionCreated>(resp).await?.id)
    }

    /// Sends raw bytes as the session config, for callers that already hold
    /// the JSON text and want the server's diagnostics on it.
    pub async fn create_session_raw(&self, config_json: impl Into<String>) -> Result<String> {
        let resp = self
            .http
            .post(self.url("/sessions"))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(config_json.into())
            .send()
            .await?;
        Ok(Self::decode::<SessionCreated>(resp).await?.id)
    }

    pub async fn state(&self, id: &str) -> Result<SessionSnapshot> {
        let resp = self.http.get(self.url(&format!("/sessions/{id}/state"))).send().await?;
        Self::decode(resp).await
    }

    pub async fn post_action(&self, id: &str, action: HumanAction) -> Result<ActionAck> {
        let resp = self
            .http
            .post(self.url(&format!("/sessions/{id}/action")))
            .json(&action)
            .send()
            .await?;
        Self::decode(resp).await
    }

    pub async fn set_mode(&self, id: &str, mode: Mode) -> Result<SessionSnapshot> {
        let resp = self
            .http
            .post(self.url(&format!("/sessions/{id}/mode")))
            .json(&ModeRequest { mode })
            .send()
            .await?;
        Self::decode(resp).await
    }

    pub async fn log(&self, id: &str, format: LogFormat) -> Result<String> {
        let name = match format {
            LogFormat::Episodes => "episodes",
            LogFormat::Summary => "summary",
            LogFormat::Eval => "eval",
        };
        let resp = self
            .http
            .get(self.url(&format!("/sessions/{id}/log")))
            .query(&[("format", name)])
            .send()
            .await?;
        let status = resp.status();
        let text = resp.text().await?;
        if status.is_success() {
            Ok(text)
        } else {
            let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
                error: text,
                snapshot: None,
            });
            Err(ClientError::Api { status, body })
        }
    }

    /// Opens the event channel. Connecting resumes a paused session.
    pub async fn events(&self, id: &str) -> Result<EventStream> {
        let ws_base = if let Some(rest) = self.base.strip_prefix("https://") {
            format!("wss://{rest}")
        } else if let Some(rest) = self.base.strip_prefix("http://") {
            format!("ws://{rest}")
        } else {
            self.base.clone()
        };
        let (socket, _) = tokio_tungstenite::connect_async(format!("{ws_base}/sessions/{id}/events")).await?;
        Ok(EventStream { socket })
    }
}

pub struct EventStream {
    socket: tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>,
}

impl EventStream {
    /// The next event, or `None` once the server closes the channel.
    pub async fn next(&mut self) -> Option<Result<Event>> {
        loop {
            match self.socket.next().await? {
                Ok(Message::Text(text)) => return Some(serde_json::from_str(&text).map_err(ClientError::from)),
                Ok(Message::Close(_)) => return None,
                Ok(_) => continue,
                Err(e) => return Some(Err(e.into())),
            }
        }
    }

    pub async fn close(mut self) -> Result<()> {
        self.socket.close(None).await?;
        Ok(())
    }
}
