//! Session relay: pairs one master and one slave connection per session and
//! forwards their messages to each other.
//!
//! The relay is a pure state machine. Callers feed it received lines and
//! disconnects and carry out the returned [`Action`]s; the websocket service
//! and the simulator share it.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::dom::{DomDocument, Mutation};
use crate::mapping::{GeometryTable, MappingOptions, MappingQuery};
use crate::protocol::{decode, encode, Bye, ChangeRecord, Changes, DecodeError, Payload, Role, SyncMessage};
use crate::splitter::{runtime_split_request, SplitConfig, SplitResult};

pub type ConnId = u64;

pub const DEFAULT_BUFFER_LIMIT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    WaitingMaster,
    WaitingSlave,
    Paired,
    Closed,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SessionState::WaitingMaster => "waiting-master",
            SessionState::WaitingSlave => "waiting-slave",
            SessionState::Paired => "paired",
            SessionState::Closed => "closed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send { conn: ConnId, line: String },
    Close { conn: ConnId },
}

#[derive(Debug, Error)]
pub enum RelayError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("the first message on a connection must be hello")]
    NotHello,
    #[error("session {session} already has a {role:?} connection")]
    RoleTaken { session: String, role: Role },
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("connection belongs to session {bound}, message names {got}")]
    SessionMismatch { bound: String, got: String },
}

/// What the hub needs to serve and re-split a session's application.
#[derive(Debug, Clone)]
pub struct SessionApp {
    /// The hub's copy of the master document as last split.
    pub master: DomDocument,
    pub split: SplitResult,
    pub config: SplitConfig,
    pub options: MappingOptions,
    pub geometry: GeometryTable,
}

#[derive(Debug)]
struct Session {
    master: Option<ConnId>,
    slave: Option<ConnId>,
    closed: bool,
    watermarks: [u64; 2],
    queues: [VecDeque<String>; 2],
    hub_seq: u64,
    app: Option<SessionApp>,
}

fn slot(role: Role) -> usize {
    match role {
        Role::Master => 0,
        Role::Slave => 1,
    }
}

fn peer(role: Role) -> Role {
    match role {
        Role::Master => Role::Slave,
        Role::Slave => Role::Master,
    }
}

impl Session {
    fn new() -> Self {
        Session {
            master: None,
            slave: None,
            closed: false,
            watermarks: [0; 2],
            queues: [VecDeque::new(), VecDeque::new()],
            hub_seq: 0,
            app: None,
        }
    }

    fn conn(&self, role: Role) -> Option<ConnId> {
        match role {
            Role::Master => self.master,
            Role::Slave => self.slave,
        }
    }

    fn conn_mut(&mut self, role: Role) -> &mut Option<ConnId> {
        match role {
            Role::Master => &mut self.master,
            Role::Slave => &mut self.slave,
        }
    }

    fn state(&self) -> SessionState {
        match (self.closed, self.master, self.slave) {
            (true, _, _) => SessionState::Closed,
            (false, Some(_), Some(_)) => SessionState::Paired,
            (false, Some(_), None) => SessionState::WaitingSlave,
            (false, None, _) => SessionState::WaitingMaster,
        }
    }
}

#[derive(Debug)]
pub struct Relay {
    sessions: HashMap<String, Session>,
    conns: HashMap<ConnId, (String, Role)>,
    buffer_limit: usize,
}

impl Default for Relay {
    fn default() -> Self {
        Relay::new(DEFAULT_BUFFER_LIMIT)
    }
}

impl Relay {
    pub fn new(buffer_limit: usize) -> Self {
        Relay { sessions: HashMap::new(), conns: HashMap::new(), buffer_limit }
    }

    /// Attaches a split application to a session so the hub can serve it and
    /// answer split requests.
    pub fn register(&mut self, session: &str, app: SessionApp) {
        self.sessions.entry(session.to_string()).or_insert_with(Session::new).app = Some(app);
    }

    pub fn app(&self, session: &str) -> Option<&SessionApp> {
        self.sessions.get(session).and_then(|s| s.app.as_ref())
    }

    pub fn state(&self, session: &str) -> Option<SessionState> {
        self.sessions.get(session).map(Session::state)
    }

    pub fn binding(&self, conn: ConnId) -> Option<(&str, Role)> {
        self.conns.get(&conn).map(|(s, r)| (s.as_str(), *r))
    }

    /// Handles one line received on `conn`.
    pub fn receive(&mut self, conn: ConnId, line: &str) -> Result<Vec<Action>, RelayError> {
        let msg = decode(line.as_bytes())?;
        let line = format!("{}\n", line.trim_end());
        let mut actions = Vec::new();
        let role = match self.conns.get(&conn) {
            None => {
                let Payload::Hello(hello) = &msg.payload else {
                    return Err(RelayError::NotHello);
                };
                let role = hello.role;
                let session = self.sessions.entry(msg.session.clone()).or_insert_with(Session::new);
                if session.closed {
                    return Err(RelayError::SessionClosed(msg.session.clone()));
                }
                if session.conn(role).is_some() {
                    return Err(RelayError::RoleTaken { session: msg.session.clone(), role });
                }
                *session.conn_mut(role) = Some(conn);
                session.watermarks[slot(role)] = msg.seq;
                self.conns.insert(conn, (msg.session.clone(), role));
                for queued in session.queues[slot(role)].drain(..) {
                    actions.push(Action::Send { conn, line: queued });
                }
                tracing::info!(session = %msg.session, ?role, state = %session.state(), "peer connected");
                self.forward(&msg.session, peer(role), line, &mut actions);
                return Ok(actions);
            }
            Some((bound, role)) => {
                if *bound != msg.session {
                    return Err(RelayError::SessionMismatch { bound: bound.clone(), got: msg.session.clone() });
                }
                *role
            }
        };
        let session = self.sessions.get_mut(&msg.session).expect("bound session exists");
        let is_hello = matches!(msg.payload, Payload::Hello(_));
        if !is_hello && msg.seq <= session.watermarks[slot(role)] {
            tracing::debug!(session = %msg.session, seq = msg.seq, "stale message dropped");
            return Ok(actions);
        }
        session.watermarks[slot(role)] = msg.seq;
        match &msg.payload {
            Payload::Bye(_) => {
                self.close(&msg.session, Some(line), &mut actions);
            }
            Payload::Geometry(table) if session.app.is_some() => {
                if let Some(app) = session.app.as_mut() {
                    app.geometry = table.clone();
                }
            }
            Payload::SplitRequest(query) if session.app.is_some() => {
                self.split_request(&msg.session, query, &mut actions);
            }
            _ => self.forward(&msg.session, peer(role), line, &mut actions),
        }
        Ok(actions)
    }

    /// Forgets a connection. The session waits for that role again.
    pub fn disconnect(&mut self, conn: ConnId) {
        let Some((session_id, role)) = self.conns.remove(&conn) else {
            return;
        };
        if let Some(session) = self.sessions.get_mut(&session_id) {
            if session.conn(role) == Some(conn) {
                *session.conn_mut(role) = None;
            }
            tracing::info!(session = %session_id, ?role, state = %session.state(), "peer disconnected");
        }
    }

    fn hub_message(&mut self, session_id: &str, payload: Payload) -> String {
        let session = self.sessions.get_mut(session_id).expect("session exists");
        session.hub_seq += 1;
        encode(&SyncMessage::new(session_id, session.hub_seq, payload))
    }

    fn forward(&mut self, session_id: &str, to: Role, line: String, actions: &mut Vec<Action>) {
        let limit = self.buffer_limit;
        let session = self.sessions.get_mut(session_id).expect("session exists");
        if let Some(conn) = session.conn(to) {
            actions.push(Action::Send { conn, line });
            return;
        }
        let queue = &mut session.queues[slot(to)];
        queue.push_back(line);
        if queue.len() > limit {
            tracing::warn!(session = %session_id, ?to, "buffer overflow; closing session");
            let bye = self.hub_message(session_id, Payload::Bye(Bye { reason: Some("buffer overflow".into()) }));
            self.close(session_id, Some(bye), actions);
        }
    }

    fn close(&mut self, session_id: &str, bye: Option<String>, actions: &mut Vec<Action>) {
        let session = self.sessions.get_mut(session_id).expect("session exists");
        session.closed = true;
        session.queues.iter_mut().for_each(VecDeque::clear);
        for role in [Role::Master, Role::Slave] {
            if let Some(conn) = session.conn_mut(role).take() {
                if let Some(line) = &bye {
                    actions.push(Action::Send { conn, line: line.clone() });
                }
                actions.push(Action::Close { conn });
                self.conns.remove(&conn);
            }
        }
        tracing::info!(session = %session_id, "session closed");
    }

    fn split_request(&mut self, session_id: &str, query: &MappingQuery, actions: &mut Vec<Action>) {
        let session = self.sessions.get_mut(session_id).expect("session exists");
        let Some(app) = session.app.as_mut() else { return };
        let outcome = runtime_split_request(&app.master, query, &app.geometry, &app.options, &app.config);
        let updates = match outcome {
            Ok(split) => apply_updates(app, split),
            Err(e) => {
                tracing::warn!(session = %session_id, error = %e, "split request failed");
                return;
            }
        };
        tracing::info!(session = %session_id, updates = updates.len(), "split request served");
        if updates.is_empty() {
            return;
        }
        let line = self.hub_message(session_id, Payload::Changes(Changes { records: updates, reset: false }));
        self.forward(session_id, Role::Master, line, actions);
    }
}

/// Applies a runtime split to the hub's copy and returns the annotation
/// updates as change records for the master.
fn apply_updates(app: &mut SessionApp, split: crate::splitter::RuntimeSplit) -> Vec<ChangeRecord> {
    let mut records = Vec::new();
    for m in split.annotation_updates {
        if let Mutation::SetAttribute { node, name, value } = &m {
            records.push(ChangeRecord::AttributeChanged {
                node: node.clone(),
                attribute: name.clone(),
                value: value.clone(),
            });
        }
        if let Err(e) = app.master.mutate(m) {
            tracing::warn!(error = %e, "hub copy rejected an annotation update");
        }
    }
    app.split = split.result;
    records
}
