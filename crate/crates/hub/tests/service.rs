use std::path::PathBuf;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};
use vsplit_core::annotation::annotate;
use vsplit_core::dom::{parse_html, DomDocument, Mutation};
use vsplit_core::mapping::{evaluate_query, GeometryTable, MappingOptions, MappingQuery};
use vsplit_core::protocol::{decode, encode, EventType, InteractionRecord, MasterEndpoint, Payload, SlaveEvent, SlaveReplica, SyncMessage};
use vsplit_core::splitter::{split, SplitConfig};
use vsplit_core::sync_hub::simulate::mirrors;
use vsplit_core::sync_hub::{SessionApp, SessionState};
use vsplit_hub::Hub;

const SESSION: &str = "hub-test";
const WAIT: Duration = Duration::from_secs(5);

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn youtube_app() -> SessionApp {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/youtube-like.html");
    let html = std::fs::read(path).unwrap();
    let doc = parse_html(&html, Some("https://videotube.example/".parse().unwrap())).unwrap();
    let query: MappingQuery =
        serde_json::from_str(r#"{"op":"leaf","criterion":{"kind":"semantic","classes":["interactive"]}}"#).unwrap();
    let options = MappingOptions::default();
    let lists = evaluate_query(&doc, &query, &GeometryTable::new(), &options).unwrap();
    let annotated = annotate(&doc, &lists).unwrap();
    let config = SplitConfig { session_id: Some(SESSION.into()), ..SplitConfig::default() };
    let result = split(&annotated, &config).unwrap();
    SessionApp { master: result.master.clone(), split: result, config, options, geometry: GeometryTable::new() }
}

struct Running {
    hub: Hub,
    port: u16,
    stop: Option<oneshot::Sender<()>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
    }
}

async fn start(hub: Hub) -> Running {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let port = listener.local_addr().unwrap().port();
    let (stop, stopped) = oneshot::channel::<()>();
    tokio::spawn(vsplit_hub::serve(listener, hub.clone(), async {
        let _ = stopped.await;
    }));
    Running { hub, port, stop: Some(stop) }
}

async fn connect(port: u16) -> Client {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://127.0.0.1:{port}/sync")).await.unwrap();
    ws
}

async fn send(ws: &mut Client, msg: &SyncMessage) {
    ws.send(Message::Text(encode(msg).into())).await.unwrap();
}

/// Next protocol message, or `None` when the hub closed the socket.
async fn next(ws: &mut Client) -> Option<SyncMessage> {
    loop {
        let frame = tokio::time::timeout(WAIT, ws.next()).await.expect("timed out waiting for the hub");
        match frame {
            Some(Ok(Message::Text(t))) => return Some(decode(t.as_bytes()).unwrap()),
            Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return None,
            Some(Ok(_)) => continue,
        }
    }
}

async fn http_get(port: u16, path: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).await.unwrap();
    let request = format!("GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n");
    stream.write_all(request.as_bytes()).await.unwrap();
    let mut response = String::new();
    tokio::time::timeout(WAIT, stream.read_to_string(&mut response)).await.unwrap().unwrap();
    let status = response.split(' ').nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let body = response.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

/// Pumps the slave until it has applied a reset snapshot.
async fn slave_catch_up(master_ws: &mut Client, master: &mut MasterEndpoint, slave_ws: &mut Client, slave: &mut SlaveReplica) {
    loop {
        let msg = next(slave_ws).await.expect("slave socket closed");
        match slave.receive(&msg) {
            SlaveEvent::Resync(req) => {
                send(slave_ws, &req).await;
                let relayed = next(master_ws).await.expect("master socket closed");
                for reply in master.receive(&relayed).unwrap() {
                    send(master_ws, &reply).await;
                }
            }
            SlaveEvent::Applied if !slave.awaiting_reset() => return,
            _ => {}
        }
    }
}

async fn pair(port: u16, app: &SessionApp) -> (Client, MasterEndpoint, Client, SlaveReplica) {
    let mut master = MasterEndpoint::new(app.split.master.clone(), SESSION).unwrap();
    let mut slave = SlaveReplica::new(app.split.slave.clone(), SESSION);
    let mut master_ws = connect(port).await;
    send(&mut master_ws, &master.hello()).await;
    let mut slave_ws = connect(port).await;
    send(&mut slave_ws, &slave.hello()).await;
    let hello = next(&mut master_ws).await.unwrap();
    assert!(matches!(hello.payload, Payload::Hello(_)));
    slave_catch_up(&mut master_ws, &mut master, &mut slave_ws, &mut slave).await;
    (master_ws, master, slave_ws, slave)
}

#[tokio::test]
async fn health_and_pages_are_served() {
    let app = youtube_app();
    let expected_slave = vsplit_core::dom::serialize_html(&app.split.slave, true);
    let running = start(Hub::default().with_app(SESSION, app)).await;
    assert_eq!(http_get(running.port, "/healthz").await, (200, "ok".to_string()));
    let (status, body) = http_get(running.port, "/app/slave.html").await;
    assert_eq!(status, 200);
    assert_eq!(body, expected_slave);
    let (status, body) = http_get(running.port, "/app/master.html").await;
    assert_eq!(status, 200);
    assert!(body.contains("vs-config"));
    let (status, body) = http_get(running.port, "/runtime/slave.js").await;
    assert_eq!(status, 200);
    assert!(body.contains("vs-config"));
    assert_eq!(http_get(running.port, "/runtime/other.js").await.0, 404);
    assert_eq!(http_get(running.port, "/app/nothing.html").await.0, 404);
}

#[tokio::test]
async fn runtime_directory_overrides_the_placeholder() {
    let dir = std::env::temp_dir().join(format!("vsplit-runtime-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("master.js"), "console.log('real runtime');").unwrap();
    let running = start(Hub::default().with_runtime_dir(&dir)).await;
    assert_eq!(http_get(running.port, "/runtime/master.js").await, (200, "console.log('real runtime');".into()));
    assert_eq!(http_get(running.port, "/runtime/slave.js").await.0, 404);
    assert_eq!(http_get(running.port, "/runtime/..%2Fsecret.js").await.0, 404);
    std::fs::remove_dir_all(dir).unwrap();
}

#[tokio::test]
async fn mutations_reach_the_slave_and_interactions_reach_the_master() {
    let app = youtube_app();
    let running = start(Hub::default().with_app(SESSION, app.clone())).await;
    let (mut master_ws, mut master, mut slave_ws, mut slave) = pair(running.port, &app).await;
    assert_eq!(running.hub.state(SESSION), Some(SessionState::Paired));
    assert!(mirrors(&master.doc, &slave.doc));

    let like = master.doc.find_by_html_id("like").unwrap();
    let msg = master
        .mutate([Mutation::SetAttribute { node: like.clone(), name: "aria-pressed".into(), value: "true".into() }])
        .unwrap()
        .unwrap();
    send(&mut master_ws, &msg).await;
    let relayed = next(&mut slave_ws).await.unwrap();
    assert_eq!(relayed, msg);
    assert_eq!(slave.receive(&relayed), SlaveEvent::Applied);
    assert_eq!(slave.doc.attr(&like, "aria-pressed"), Some("true"));
    assert!(mirrors(&master.doc, &slave.doc));

    let click = slave.message(Payload::Interaction(InteractionRecord {
        node: like.clone(),
        event_type: EventType::Click,
        detail: Default::default(),
    }));
    send(&mut slave_ws, &click).await;
    assert_eq!(next(&mut master_ws).await.unwrap(), click);
}

#[tokio::test]
async fn interactions_are_buffered_until_the_master_connects() {
    let app = youtube_app();
    let running = start(Hub::default().with_app(SESSION, app.clone())).await;
    let mut slave = SlaveReplica::new(app.split.slave.clone(), SESSION);
    let mut slave_ws = connect(running.port).await;
    send(&mut slave_ws, &slave.hello()).await;
    let like = slave.doc.find_by_html_id("like").unwrap();
    let click = slave.message(Payload::Interaction(InteractionRecord {
        node: like,
        event_type: EventType::Click,
        detail: Default::default(),
    }));
    send(&mut slave_ws, &click).await;
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(running.hub.state(SESSION), Some(SessionState::WaitingMaster));

    let mut master = MasterEndpoint::new(app.split.master.clone(), SESSION).unwrap();
    let mut master_ws = connect(running.port).await;
    send(&mut master_ws, &master.hello()).await;
    assert!(matches!(next(&mut master_ws).await.unwrap().payload, Payload::Hello(_)));
    assert_eq!(next(&mut master_ws).await.unwrap(), click);
}

#[tokio::test]
async fn second_master_is_refused() {
    let app = youtube_app();
    let running = start(Hub::default().with_app(SESSION, app.clone())).await;
    let mut first = connect(running.port).await;
    let mut master = MasterEndpoint::new(app.split.master.clone(), SESSION).unwrap();
    send(&mut first, &master.hello()).await;
    tokio::time::sleep(Duration::from_millis(50)).await;

    let mut second = connect(running.port).await;
    let mut intruder = MasterEndpoint::new(app.split.master.clone(), SESSION).unwrap();
    send(&mut second, &intruder.hello()).await;
    assert_eq!(next(&mut second).await, None);
    assert_eq!(running.hub.state(SESSION), Some(SessionState::WaitingSlave));
}

#[tokio::test]
async fn garbage_before_hello_is_refused() {
    let running = start(Hub::default()).await;
    let mut ws = connect(running.port).await;
    ws.send(Message::Text("not json".into())).await.unwrap();
    assert_eq!(next(&mut ws).await, None);
}

#[tokio::test]
async fn disconnect_returns_the_session_to_waiting() {
    let app = youtube_app();
    let running = start(Hub::default().with_app(SESSION, app.clone())).await;
    let (_master_ws, _master, slave_ws, _slave) = pair(running.port, &app).await;
    drop(slave_ws);
    let mut state = None;
    for _ in 0..100 {
        state = running.hub.state(SESSION);
        if state == Some(SessionState::WaitingSlave) {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert_eq!(state, Some(SessionState::WaitingSlave));
}

#[tokio::test]
async fn split_request_resplits_at_run_time() {
    let app = youtube_app();
    let running = start(Hub::default().with_app(SESSION, app.clone())).await;
    let (mut master_ws, mut master, mut slave_ws, mut slave) = pair(running.port, &app).await;
    let before = http_get(running.port, "/app/slave.html").await.1;
    assert!(!before.contains("id=\"comments-title\""));

    let query: MappingQuery =
        serde_json::from_str(r#"{"op":"leaf","criterion":{"kind":"semantic","classes":["visual"]}}"#).unwrap();
    send(&mut slave_ws, &slave.message(Payload::SplitRequest(query))).await;

    // The hub tells the master about the new annotations; the master's
    // observer turns them into transitions for the slave.
    let updates = next(&mut master_ws).await.unwrap();
    assert!(matches!(updates.payload, Payload::Changes(_)));
    for reply in master.receive(&updates).unwrap() {
        send(&mut master_ws, &reply).await;
    }
    let transitions = next(&mut slave_ws).await.unwrap();
    assert_eq!(slave.receive(&transitions), SlaveEvent::Applied);
    assert!(mirrors(&master.doc, &slave.doc));
    assert!(slave.doc.find_by_html_id("comments-title").is_some());
    assert!(slave.doc.find_by_html_id("like").is_none());

    let after = http_get(running.port, "/app/slave.html").await.1;
    assert!(after.contains("id=\"comments-title\""));
    assert!(!after.contains("id=\"like\""));
    let served = parse_html(after.as_bytes(), None).unwrap();
    assert_eq!(body_ids(&served), body_ids(&slave.doc));
}

fn body_ids(doc: &DomDocument) -> Vec<String> {
    let body = doc.body().unwrap();
    doc.descendants(&body)
        .into_iter()
        .filter_map(|n| doc.attr(&n, "id").map(str::to_string))
        .collect()
}
