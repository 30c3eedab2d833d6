//! The hub process: one HTTP port that serves the split application, the
//! client runtime and the `/sync` message socket.
//!
//! Every websocket connection gets a connection id and a channel. Received
//! text frames go through the shared [`Relay`]; the actions it returns are
//! carried out by pushing lines onto the target connections' channels.
//! A frame may carry several newline-separated messages.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use vsplit_core::dom::serialize_html;
use vsplit_core::sync_hub::{Action, ConnId, Relay, RelayError, SessionApp, SessionState, DEFAULT_BUFFER_LIMIT};

/// Placeholder runtime served when no runtime directory is configured. It
/// announces itself to the hub and does nothing else.
const PLACEHOLDER_RUNTIME: &str = r#"(function () {
  var cfg = document.getElementById("vs-config");
  if (!cfg) { return; }
  var conf = JSON.parse(cfg.textContent);
  var ws = new WebSocket(conf.hub);
  ws.onopen = function () {
    ws.send(JSON.stringify({session: conf.session, seq: 1, kind: "hello", payload: {role: conf.role}}));
  };
  console.warn("vsplit: placeholder runtime; serve the real client runtime with --runtime-dir");
})();
"#;

enum Outgoing {
    Line(String),
    Close,
}

struct Inner {
    relay: Relay,
    conns: HashMap<ConnId, mpsc::UnboundedSender<Outgoing>>,
    next_conn: ConnId,
    /// Session whose application `/app/*.html` serves.
    app_session: Option<String>,
    runtime_dir: Option<PathBuf>,
}

/// Shared hub state; cheap to clone.
#[derive(Clone)]
pub struct Hub {
    inner: Arc<Mutex<Inner>>,
}

impl Default for Hub {
    fn default() -> Self {
        Hub::new(DEFAULT_BUFFER_LIMIT)
    }
}

impl Hub {
    pub fn new(buffer_limit: usize) -> Self {
        Hub {
            inner: Arc::new(Mutex::new(Inner {
                relay: Relay::new(buffer_limit),
                conns: HashMap::new(),
                next_conn: 1,
                app_session: None,
                runtime_dir: None,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// Serves `app` under `/app/` and answers split requests for `session`.
    pub fn with_app(self, session: &str, app: SessionApp) -> Self {
        {
            let mut inner = self.lock();
            inner.relay.register(session, app);
            inner.app_session = Some(session.to_string());
        }
        self
    }

    /// Serves `/runtime/*.js` from `dir` instead of the placeholder.
    pub fn with_runtime_dir(self, dir: impl Into<PathBuf>) -> Self {
        self.lock().runtime_dir = Some(dir.into());
        self
    }

    pub fn state(&self, session: &str) -> Option<SessionState> {
        self.lock().relay.state(session)
    }

    /// The current master and slave pages of the served application.
    pub fn pages(&self) -> Option<(String, String)> {
        let inner = self.lock();
        let app = inner.relay.app(inner.app_session.as_deref()?)?;
        Some((serialize_html(&app.split.master, true), serialize_html(&app.split.slave, true)))
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/healthz", get(|| async { "ok" }))
            .route("/app/{page}", get(app_page))
            .route("/runtime/{file}", get(runtime_file))
            .route("/sync", get(sync_socket))
            .with_state(self.clone())
    }

    fn connect(&self) -> (ConnId, mpsc::UnboundedReceiver<Outgoing>) {
        let (tx, rx) = mpsc::unbounded_channel();
        let mut inner = self.lock();
        let conn = inner.next_conn;
        inner.next_conn += 1;
        inner.conns.insert(conn, tx);
        (conn, rx)
    }

    fn disconnect(&self, conn: ConnId) {
        let mut inner = self.lock();
        inner.conns.remove(&conn);
        inner.relay.disconnect(conn);
    }

    /// Runs one received line through the relay and dispatches the result.
    fn receive(&self, conn: ConnId, line: &str) {
        let mut inner = self.lock();
        let bound = inner.relay.binding(conn).is_some();
        match inner.relay.receive(conn, line) {
            Ok(actions) => {
                for action in actions {
                    match action {
                        Action::Send { conn, line } => {
                            if let Some(tx) = inner.conns.get(&conn) {
                                let _ = tx.send(Outgoing::Line(line));
                            }
                        }
                        Action::Close { conn } => {
                            if let Some(tx) = inner.conns.get(&conn) {
                                let _ = tx.send(Outgoing::Close);
                            }
                        }
                    }
                }
            }
            Err(e) => {
                tracing::warn!(conn, error = %e, "message rejected");
                // A connection that never got past its hello is refused.
                let refuse = !bound
                    || matches!(e, RelayError::SessionMismatch { .. } | RelayError::SessionClosed(_));
                if refuse {
                    if let Some(tx) = inner.conns.get(&conn) {
                        let _ = tx.send(Outgoing::Close);
                    }
                }
            }
        }
    }
}

async fn app_page(State(hub): State<Hub>, UrlPath(page): UrlPath<String>) -> Response {
    let Some((master, slave)) = hub.pages() else {
        return (StatusCode::NOT_FOUND, "no application is being served").into_response();
    };
    let body = match page.as_str() {
        "master.html" => master,
        "slave.html" => slave,
        _ => return StatusCode::NOT_FOUND.into_response(),
    };
    ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], body).into_response()
}

fn is_plain_file_name(name: &str) -> bool {
    let path = Path::new(name);
    path.components().count() == 1 && matches!(path.components().next(), Some(Component::Normal(_)))
}

async fn runtime_file(State(hub): State<Hub>, UrlPath(file): UrlPath<String>) -> Response {
    if !file.ends_with(".js") || !is_plain_file_name(&file) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let dir = hub.lock().runtime_dir.clone();
    let body = match dir {
        Some(dir) => match tokio::fs::read_to_string(dir.join(&file)).await {
            Ok(text) => text,
            Err(_) => return StatusCode::NOT_FOUND.into_response(),
        },
        None if file == "master.js" || file == "slave.js" => PLACEHOLDER_RUNTIME.to_string(),
        None => return StatusCode::NOT_FOUND.into_response(),
    };
    ([(header::CONTENT_TYPE, "text/javascript; charset=utf-8")], body).into_response()
}

async fn sync_socket(State(hub): State<Hub>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| connection(hub, socket))
}

async fn connection(hub: Hub, socket: WebSocket) {
    let (conn, mut rx) = hub.connect();
    tracing::debug!(conn, "socket opened");
    let (mut sink, mut stream) = socket.split();
    let writer = tokio::spawn(async move {
        while let Some(out) = rx.recv().await {
            match out {
                Outgoing::Line(line) => {
                    if sink.send(Message::Text(line.trim_end().to_string().into())).await.is_err() {
                        break;
                    }
                }
                Outgoing::Close => {
                    let _ = sink.send(Message::Close(None)).await;
                    break;
                }
            }
        }
    });
    while let Some(Ok(frame)) = stream.next().await {
        let text = match frame {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => match String::from_utf8(b.to_vec()) {
                Ok(t) => t,
                Err(_) => continue,
            },
            Message::Close(_) => break,
            _ => continue,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            hub.receive(conn, line);
        }
        if writer.is_finished() {
            break;
        }
    }
    hub.disconnect(conn);
    writer.abort();
    tracing::debug!(conn, "socket closed");
}

/// Serves the hub on `listener` until `shutdown` resolves.
pub async fn serve(listener: TcpListener, hub: Hub, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, hub.router()).with_graceful_shutdown(shutdown).await
}
