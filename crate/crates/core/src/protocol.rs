//! Wire protocol between master, hub and slave.
//!
//! Messages are single JSON lines:
//! `{"session":"s1","seq":3,"kind":"changes","payload":{...}}`.
//! The master's body projection is mirrored to the slave through
//! [`ChangeRecord`]s; the slave detects loss through sequence numbers and
//! asks for a full snapshot with a `resync` message.

use std::collections::{BTreeMap, HashSet};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;
use thiserror::Error;

use crate::annotation::DEVICE_ATTR;
use crate::dom::{
    parse_fragment, serialize_node, DomDocument, DomError, Fragment, Mutation, MutationRecord,
    NodeData, NodeId, IDENTITY_ATTR,
};
use crate::mapping::{GeometryTable, MappingQuery};
use crate::splitter::{project, slave_attribute, Projection};

pub use crate::splitter::Role;

/// One change to the slave's mirrored content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", deny_unknown_fields)]
pub enum ChangeRecord {
    ChildAdded {
        node: NodeId,
        parent: NodeId,
        #[serde(deserialize_with = "required")]
        prev_sibling: Option<NodeId>,
        /// HTML of the added subtree, with identity attributes.
        subtree: String,
    },
    ChildRemoved {
        node: NodeId,
    },
    AttributeChanged {
        node: NodeId,
        attribute: String,
        value: String,
    },
    AttributeRemoved {
        node: NodeId,
        attribute: String,
    },
    TextChanged {
        node: NodeId,
        value: String,
    },
    Reparented {
        node: NodeId,
        parent: NodeId,
        #[serde(deserialize_with = "required")]
        prev_sibling: Option<NodeId>,
    },
}

/// A nullable field that must still be present.
fn required<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<Option<T>, D::Error> {
    Option::<T>::deserialize(d)
}

impl ChangeRecord {
    pub fn node(&self) -> &NodeId {
        match self {
            ChangeRecord::ChildAdded { node, .. }
            | ChangeRecord::ChildRemoved { node }
            | ChangeRecord::AttributeChanged { node, .. }
            | ChangeRecord::AttributeRemoved { node, .. }
            | ChangeRecord::TextChanged { node, .. }
            | ChangeRecord::Reparented { node, .. } => node,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    Click,
    Input,
    Change,
    Submit,
    Keydown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionRecord {
    pub node: NodeId,
    pub event_type: EventType,
    #[serde(default)]
    pub detail: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub role: Role,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bye {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Changes {
    pub records: Vec<ChangeRecord>,
    /// Clear the slave body before applying: a full snapshot.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reset: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resync {
    /// Last sequence number the requester applied.
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Hello(Hello),
    Bye(Bye),
    Changes(Changes),
    Interaction(InteractionRecord),
    Geometry(GeometryTable),
    SplitRequest(MappingQuery),
    Resync(Resync),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Hello,
    Bye,
    Changes,
    Interaction,
    Geometry,
    SplitRequest,
    Resync,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Hello,
        Kind::Bye,
        Kind::Changes,
        Kind::Interaction,
        Kind::Geometry,
        Kind::SplitRequest,
        Kind::Resync,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Hello => "hello",
            Kind::Bye => "bye",
            Kind::Changes => "changes",
            Kind::Interaction => "interaction",
            Kind::Geometry => "geometry",
            Kind::SplitRequest => "split_request",
            Kind::Resync => "resync",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl Payload {
    pub fn kind(&self) -> Kind {
        match self {
            Payload::Hello(_) => Kind::Hello,
            Payload::Bye(_) => Kind::Bye,
            Payload::Changes(_) => Kind::Changes,
            Payload::Interaction(_) => Kind::Interaction,
            Payload::Geometry(_) => Kind::Geometry,
            Payload::SplitRequest(_) => Kind::SplitRequest,
            Payload::Resync(_) => Kind::Resync,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncMessage {
    pub session: String,
    pub seq: u64,
    pub payload: Payload,
}

impl SyncMessage {
    pub fn new(session: impl Into<String>, seq: u64, payload: Payload) -> Self {
        SyncMessage { session: session.into(), seq, payload }
    }

    pub fn kind(&self) -> Kind {
        self.payload.kind()
    }
}

#[derive(Serialize)]
struct Envelope<'a, P: Serialize> {
    session: &'a str,
    seq: u64,
    kind: &'static str,
    payload: &'a P,
}

/// Encodes a message as one JSON line, newline included.
pub fn encode(msg: &SyncMessage) -> String {
    fn line<P: Serialize>(msg: &SyncMessage, payload: &P) -> String {
        let envelope = Envelope { session: &msg.session, seq: msg.seq, kind: msg.kind().as_str(), payload };
        let mut s = serde_json::to_string(&envelope).expect("messages always serialize");
        s.push('\n');
        s
    }
    match &msg.payload {
        Payload::Hello(p) => line(msg, p),
        Payload::Bye(p) => line(msg, p),
        Payload::Changes(p) => line(msg, p),
        Payload::Interaction(p) => line(msg, p),
        Payload::Geometry(p) => line(msg, p),
        Payload::SplitRequest(p) => line(msg, p),
        Payload::Resync(p) => line(msg, p),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed JSON at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("unknown message kind {kind:?} at byte {offset}")]
    UnknownKind { kind: String, offset: usize },
    #[error("missing field {field:?} in message starting at byte {offset}")]
    MissingField { field: &'static str, offset: usize },
    #[error("invalid {field} at byte {offset}: {message}")]
    Invalid { field: &'static str, offset: usize, message: String },
}

impl DecodeError {
    pub fn offset(&self) -> usize {
        match self {
            DecodeError::Malformed { offset, .. }
            | DecodeError::UnknownKind { offset, .. }
            | DecodeError::MissingField { offset, .. }
            | DecodeError::Invalid { offset, .. } => *offset,
        }
    }
}

/// Byte offset of a serde_json error position within `text`.
fn error_offset(text: &str, err: &serde_json::Error) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(err.line().saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + err.column().saturating_sub(1)).min(text.len())
}

#[derive(Deserialize)]
struct RawEnvelope<'a> {
    #[serde(borrow)]
    session: Option<&'a RawValue>,
    #[serde(borrow)]
    seq: Option<&'a RawValue>,
    #[serde(borrow)]
    kind: Option<&'a RawValue>,
    #[serde(borrow)]
    payload: Option<&'a RawValue>,
}

/// Decodes one message. Every error carries the byte offset it refers to.
pub fn decode<'a>(bytes: &'a [u8]) -> Result<SyncMessage, DecodeError> {
    let text = std::str::from_utf8(bytes).map_err(|e| DecodeError::Malformed {
        offset: e.valid_up_to(),
        message: "invalid UTF-8".into(),
    })?;
    let raw: RawEnvelope<'a> = serde_json::from_str(text).map_err(|e| {
        let offset = match e.classify() {
            serde_json::error::Category::Eof => text.len(),
            _ => error_offset(text, &e),
        };
        match e.classify() {
            serde_json::error::Category::Data => DecodeError::Invalid { field: "message", offset, message: e.to_string() },
            _ => DecodeError::Malformed { offset, message: e.to_string() },
        }
    })?;
    let start = text.len() - text.trim_start().len();
    let offset_of = |v: &RawValue| v.get().as_ptr() as usize - text.as_ptr() as usize;
    let field = |name: &'static str, v: Option<&'a RawValue>| {
        v.ok_or(DecodeError::MissingField { field: name, offset: start })
    };

    let kind_raw = field("kind", raw.kind)?;
    let kind_str: String = typed("kind", kind_raw, offset_of(kind_raw))?;
    let kind = Kind::parse(&kind_str).ok_or(DecodeError::UnknownKind { kind: kind_str, offset: offset_of(kind_raw) })?;

    let session_raw = field("session", raw.session)?;
    let session: String = typed("session", session_raw, offset_of(session_raw))?;
    if session.is_empty() {
        return Err(DecodeError::Invalid { field: "session", offset: offset_of(session_raw), message: "empty session".into() });
    }
    let seq_raw = field("seq", raw.seq)?;
    let seq: u64 = typed("seq", seq_raw, offset_of(seq_raw))?;
    let payload_raw = field("payload", raw.payload)?;
    let at = offset_of(payload_raw);
    let payload = match kind {
        Kind::Hello => Payload::Hello(typed("payload", payload_raw, at)?),
        Kind::Bye => Payload::Bye(typed("payload", payload_raw, at)?),
        Kind::Changes => Payload::Changes(typed("payload", payload_raw, at)?),
        Kind::Interaction => {
            let record: InteractionRecord = typed("payload", payload_raw, at)?;
            if record.node.as_str().is_empty() {
                return Err(DecodeError::Invalid { field: "payload", offset: at, message: "empty node".into() });
            }
            Payload::Interaction(record)
        }
        Kind::Geometry => Payload::Geometry(typed("payload", payload_raw, at)?),
        Kind::SplitRequest => Payload::SplitRequest(typed("payload", payload_raw, at)?),
        Kind::Resync => Payload::Resync(typed("payload", payload_raw, at)?),
    };
    Ok(SyncMessage { session, seq, payload })
}

fn typed<T: DeserializeOwned>(field: &'static str, raw: &RawValue, at: usize) -> Result<T, DecodeError> {
    serde_json::from_str(raw.get()).map_err(|e| DecodeError::Invalid {
        field,
        offset: at + error_offset(raw.get(), &e),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyErrorKind {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("bad subtree for {node}: {reason}")]
    BadSubtree { node: NodeId, reason: String },
    #[error(transparent)]
    Rejected(DomError),
}

/// A record could not be applied: the replica has diverged from the master.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("desync at record {index}: {kind}")]
pub struct ApplyError {
    pub index: usize,
    pub kind: ApplyErrorKind,
}

fn dom_error(e: DomError) -> ApplyErrorKind {
    match e {
        DomError::UnknownNode(n) => ApplyErrorKind::UnknownNode(n),
        DomError::DuplicateId(n) => ApplyErrorKind::DuplicateNode(n),
        other => ApplyErrorKind::Rejected(other),
    }
}

fn fragment_ids_complete(f: &Fragment) -> bool {
    f.id.is_some() && f.children.iter().all(fragment_ids_complete)
}

/// Parses the subtree of a `childAdded` record in the context of its parent.
pub fn decode_subtree(node: &NodeId, subtree: &str, context: &str) -> Result<Fragment, ApplyErrorKind> {
    let bad = |reason: &str| ApplyErrorKind::BadSubtree { node: node.clone(), reason: reason.into() };
    let mut parsed = parse_fragment(subtree, context);
    let mut fragment = match parsed.len() {
        0 => Fragment::text(""),
        1 => parsed.pop().expect("one fragment"),
        _ => return Err(bad("more than one root")),
    };
    match &fragment.id {
        Some(id) if id != node => return Err(bad("root identity differs from node")),
        _ => fragment.id = Some(node.clone()),
    }
    if !fragment_ids_complete(&fragment) {
        return Err(bad("descendant without identity"));
    }
    Ok(fragment)
}

fn apply_one(replica: &mut DomDocument, record: &ChangeRecord) -> Result<(), ApplyErrorKind> {
    let mutation = match record {
        ChangeRecord::ChildAdded { node, parent, prev_sibling, subtree } => {
            if replica.contains(node) {
                return Err(ApplyErrorKind::DuplicateNode(node.clone()));
            }
            let context = replica
                .tag(parent)
                .ok_or_else(|| ApplyErrorKind::UnknownNode(parent.clone()))?
                .to_string();
            Mutation::InsertNode {
                parent: parent.clone(),
                prev: prev_sibling.clone(),
                node: decode_subtree(node, subtree, &context)?,
            }
        }
        ChangeRecord::ChildRemoved { node } => Mutation::RemoveNode { node: node.clone() },
        ChangeRecord::AttributeChanged { node, attribute, value } => Mutation::SetAttribute {
            node: node.clone(),
            name: attribute.clone(),
            value: value.clone(),
        },
        ChangeRecord::AttributeRemoved { node, attribute } => Mutation::RemoveAttribute {
            node: node.clone(),
            name: attribute.clone(),
        },
        ChangeRecord::TextChanged { node, value } => Mutation::SetText { node: node.clone(), text: value.clone() },
        ChangeRecord::Reparented { node, parent, prev_sibling } => Mutation::MoveNode {
            node: node.clone(),
            parent: parent.clone(),
            prev: prev_sibling.clone(),
        },
    };
    replica.mutate(mutation).map(|_| ()).map_err(dom_error)
}

/// Applies records in order. Stops at the first record that does not fit
/// the replica; that record leaves the replica untouched.
pub fn apply_changes(replica: &mut DomDocument, records: &[ChangeRecord]) -> Result<(), ApplyError> {
    for (index, record) in records.iter().enumerate() {
        apply_one(replica, record).map_err(|kind| ApplyError { index, kind })?;
    }
    Ok(())
}

/// Empties the body and drops its attributes, ready for a snapshot.
pub fn reset_body(replica: &mut DomDocument) {
    let Some(body) = replica.body() else { return };
    for c in replica.children(&body).to_vec() {
        let _ = replica.mutate(Mutation::RemoveNode { node: c });
    }
    let names: Vec<String> = replica
        .element(&body)
        .map(|e| e.attributes.iter().map(|(n, _)| n.to_string()).collect())
        .unwrap_or_default();
    for name in names {
        if name != IDENTITY_ATTR {
            let _ = replica.mutate(Mutation::RemoveAttribute { node: body.clone(), name });
        }
    }
}

/// Turns master mutation records into slave change records.
///
/// The tracker keeps a shadow of the master and the slave-side projection it
/// has described so far. Attribute and text changes on mirrored nodes map
/// directly; structural changes (and `data-device` changes, which move nodes
/// in or out of scope) are resolved by diffing the new projection against
/// the known one.
#[derive(Debug, Clone)]
pub struct MirrorTracker {
    shadow: DomDocument,
    replica: DomDocument,
    body: NodeId,
}

impl MirrorTracker {
    pub fn new(master: &DomDocument) -> Option<Self> {
        let replica = project(master)?;
        let body = replica.body()?;
        Some(MirrorTracker { shadow: master.clone(), replica, body })
    }

    /// The master as the tracker knows it.
    pub fn shadow(&self) -> &DomDocument {
        &self.shadow
    }

    /// The slave-side projection the emitted records describe.
    pub fn replica(&self) -> &DomDocument {
        &self.replica
    }

    fn mirrored(&self, node: &NodeId) -> bool {
        self.replica.contains(node)
            && (*node == self.body || self.replica.ancestors(node).any(|a| *a == self.body))
    }

    pub fn process(&mut self, records: &[MutationRecord]) -> Result<Vec<ChangeRecord>, DomError> {
        let mut out = Vec::new();
        let mut structural = false;
        for record in records {
            self.shadow.apply_record(record)?;
            if structural {
                continue;
            }
            match record {
                MutationRecord::AttributeChanged { node, name, value } if name != DEVICE_ATTR => {
                    if !self.mirrored(node) {
                        continue;
                    }
                    if let Some(value) = slave_attribute(name, value, self.shadow.base_url()) {
                        self.set_attribute(node, name, &value, &mut out)?;
                    }
                }
                MutationRecord::AttributeRemoved { node, name } if name != DEVICE_ATTR => {
                    if self.mirrored(node) && self.replica.attr(node, name).is_some() {
                        self.replica.mutate(Mutation::RemoveAttribute { node: node.clone(), name: name.clone() })?;
                        out.push(ChangeRecord::AttributeRemoved { node: node.clone(), attribute: name.clone() });
                    }
                }
                MutationRecord::TextChanged { node, text } => {
                    if self.mirrored(node) {
                        self.set_text(node, text, &mut out)?;
                    }
                }
                _ => structural = true,
            }
        }
        if structural {
            self.reconcile(&mut out)?;
        }
        Ok(out)
    }

    fn set_attribute(&mut self, node: &NodeId, name: &str, value: &str, out: &mut Vec<ChangeRecord>) -> Result<(), DomError> {
        let m = Mutation::SetAttribute { node: node.clone(), name: name.into(), value: value.into() };
        if self.replica.mutate(m)?.is_some() {
            out.push(ChangeRecord::AttributeChanged { node: node.clone(), attribute: name.into(), value: value.into() });
        }
        Ok(())
    }

    fn set_text(&mut self, node: &NodeId, text: &str, out: &mut Vec<ChangeRecord>) -> Result<(), DomError> {
        if self.replica.mutate(Mutation::SetText { node: node.clone(), text: text.into() })?.is_some() {
            out.push(ChangeRecord::TextChanged { node: node.clone(), value: text.into() });
        }
        Ok(())
    }

    fn diff_data(&mut self, projection: &Projection, id: &NodeId, out: &mut Vec<ChangeRecord>) -> Result<(), DomError> {
        match &projection.data[id] {
            NodeData::Element(desired) => {
                for (name, value) in desired.attributes.iter() {
                    if name != IDENTITY_ATTR && self.replica.attr(id, name) != Some(value) {
                        self.set_attribute(id, name, value, out)?;
                    }
                }
                let stale: Vec<String> = self
                    .replica
                    .element(id)
                    .map(|e| {
                        e.attributes
                            .iter()
                            .filter(|(n, _)| *n != IDENTITY_ATTR && !desired.attributes.contains(n))
                            .map(|(n, _)| n.to_string())
                            .collect()
                    })
                    .unwrap_or_default();
                for name in stale {
                    self.replica.mutate(Mutation::RemoveAttribute { node: id.clone(), name: name.clone() })?;
                    out.push(ChangeRecord::AttributeRemoved { node: id.clone(), attribute: name });
                }
            }
            NodeData::Text(t) | NodeData::Comment(t) => {
                if self.replica.node(id).and_then(|n| n.text()) != Some(t.as_str()) {
                    self.set_text(id, t, out)?;
                }
            }
        }
        Ok(())
    }

    fn preceding_wanted(&self, node: &NodeId, wanted: &HashSet<&NodeId>) -> Option<NodeId> {
        let mut cur = self.replica.prev_sibling(node);
        while let Some(p) = cur {
            if wanted.contains(&p) {
                return Some(p);
            }
            cur = self.replica.prev_sibling(&p);
        }
        None
    }

    fn reconcile(&mut self, out: &mut Vec<ChangeRecord>) -> Result<(), DomError> {
        let Some(projection) = Projection::of(&self.shadow) else {
            tracing::warn!("master has no body; nothing to mirror");
            return Ok(());
        };
        if projection.body != self.body {
            tracing::warn!("master body was replaced; mirroring continues on the original body");
            return Ok(());
        }
        self.diff_data(&projection, &projection.body.clone(), out)?;

        // Place every desired node, top-down.
        let mut parents = vec![projection.body.clone()];
        while let Some(parent) = parents.pop() {
            let mut prev: Option<NodeId> = None;
            let wanted: HashSet<&NodeId> = projection.children_of(&parent).iter().collect();
            for c in projection.children_of(&parent) {
                if !self.replica.contains(c) {
                    let replica = &self.replica;
                    let fragment = projection.fragment(c, &|n| replica.contains(n));
                    self.replica.mutate(Mutation::InsertNode {
                        parent: parent.clone(),
                        prev: prev.clone(),
                        node: fragment,
                    })?;
                    out.push(ChangeRecord::ChildAdded {
                        node: c.clone(),
                        parent: parent.clone(),
                        prev_sibling: prev.clone(),
                        subtree: serialize_node(&self.replica, c, true),
                    });
                } else {
                    // Siblings that are about to leave this parent do not
                    // count: a node is in place when the nearest wanted
                    // sibling before it is the one that should precede it.
                    let in_place = self.replica.parent(c) == Some(&parent)
                        && self.preceding_wanted(c, &wanted) == prev;
                    if !in_place {
                        self.replica.mutate(Mutation::MoveNode {
                            node: c.clone(),
                            parent: parent.clone(),
                            prev: prev.clone(),
                        })?;
                        out.push(ChangeRecord::Reparented {
                            node: c.clone(),
                            parent: parent.clone(),
                            prev_sibling: prev.clone(),
                        });
                    }
                    self.diff_data(&projection, c, out)?;
                }
                parents.push(c.clone());
                prev = Some(c.clone());
            }
        }

        // Drop what is no longer mirrored.
        let mut stack = self.replica.children(&self.body).to_vec();
        while let Some(n) = stack.pop() {
            if projection.contains(&n) {
                stack.extend(self.replica.children(&n).iter().cloned());
            } else {
                self.replica.mutate(Mutation::RemoveNode { node: n.clone() })?;
                out.push(ChangeRecord::ChildRemoved { node: n });
            }
        }
        Ok(())
    }

    /// Records that rebuild the current projection on a reset slave body.
    pub fn snapshot(&self) -> Vec<ChangeRecord> {
        let mut out = Vec::new();
        if let Some(body) = self.replica.element(&self.body) {
            for (name, value) in body.attributes.iter() {
                if name != IDENTITY_ATTR {
                    out.push(ChangeRecord::AttributeChanged {
                        node: self.body.clone(),
                        attribute: name.into(),
                        value: value.into(),
                    });
                }
            }
        }
        let mut prev = None;
        for c in self.replica.children(&self.body) {
            out.push(ChangeRecord::ChildAdded {
                node: c.clone(),
                parent: self.body.clone(),
                prev_sibling: prev.clone(),
                subtree: serialize_node(&self.replica, c, true),
            });
            prev = Some(c.clone());
        }
        out
    }
}

/// Convenience form of [`MirrorTracker::process`].
pub fn diff_to_changes(tracker: &mut MirrorTracker, records: &[MutationRecord]) -> Result<Vec<ChangeRecord>, DomError> {
    tracker.process(records)
}

/// The master side of a session: the live document, its tracker and the
/// outgoing sequence counter.
#[derive(Debug, Clone)]
pub struct MasterEndpoint {
    pub doc: DomDocument,
    tracker: MirrorTracker,
    session: String,
    seq: u64,
}

impl MasterEndpoint {
    pub fn new(doc: DomDocument, session: impl Into<String>) -> Option<Self> {
        let tracker = MirrorTracker::new(&doc)?;
        Some(MasterEndpoint { doc, tracker, session: session.into(), seq: 0 })
    }

    pub fn session(&self) -> &str {
        &self.session
    }

    pub fn tracker(&self) -> &MirrorTracker {
        &self.tracker
    }

    pub fn message(&mut self, payload: Payload) -> SyncMessage {
        self.seq += 1;
        SyncMessage::new(self.session.clone(), self.seq, payload)
    }

    pub fn hello(&mut self) -> SyncMessage {
        self.message(Payload::Hello(Hello { role: Role::Master }))
    }

    /// Applies a batch of mutations; returns the Changes message to send, if
    /// any mirrored content changed. Stops at the first failing mutation,
    /// after mirroring the ones before it.
    pub fn mutate(&mut self, mutations: impl IntoIterator<Item = Mutation>) -> Result<Option<SyncMessage>, DomError> {
        let mut records = Vec::new();
        let mut failure = None;
        for m in mutations {
            match self.doc.mutate(m) {
                Ok(Some(r)) => records.push(r),
                Ok(None) => {}
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let outgoing = self.publish(&records)?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(outgoing)
    }

    /// Mirrors records of mutations already applied to `doc` directly.
    pub fn publish(&mut self, records: &[MutationRecord]) -> Result<Option<SyncMessage>, DomError> {
        let changes = self.tracker.process(records)?;
        Ok((!changes.is_empty()).then(|| self.changes(changes, false)))
    }

    fn changes(&mut self, records: Vec<ChangeRecord>, reset: bool) -> SyncMessage {
        self.message(Payload::Changes(Changes { records, reset }))
    }

    /// An empty Changes message; lets the slave notice trailing losses.
    pub fn heartbeat(&mut self) -> SyncMessage {
        self.changes(Vec::new(), false)
    }

    /// Handles a message relayed to the master. Returns the messages to send back.
    pub fn receive(&mut self, msg: &SyncMessage) -> Result<Vec<SyncMessage>, DomError> {
        match &msg.payload {
            Payload::Resync(_) => Ok(vec![self.snapshot()]),
            Payload::Changes(changes) => {
                // Annotation updates from the hub after a split request. Nodes
                // the master no longer has are skipped.
                let mutations: Vec<Mutation> = changes
                    .records
                    .iter()
                    .filter(|r| self.doc.contains(r.node()))
                    .filter_map(|r| match r {
                        ChangeRecord::AttributeChanged { node, attribute, value } => Some(Mutation::SetAttribute {
                            node: node.clone(),
                            name: attribute.clone(),
                            value: value.clone(),
                        }),
                        ChangeRecord::AttributeRemoved { node, attribute } => Some(Mutation::RemoveAttribute {
                            node: node.clone(),
                            name: attribute.clone(),
                        }),
                        _ => None,
                    })
                    .collect();
                Ok(self.mutate(mutations)?.into_iter().collect())
            }
            _ => Ok(Vec::new()),
        }
    }

    /// A full snapshot answering a Resync.
    pub fn snapshot(&mut self) -> SyncMessage {
        let records = self.tracker.snapshot();
        self.changes(records, true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlaveEvent {
    Applied,
    /// Stale or duplicate message, dropped.
    Ignored,
    /// The slave lost track and sends this Resync request.
    Resync(SyncMessage),
    /// Not a message the replica acts on.
    Other,
}

/// The slave side of a session: its document and sequence bookkeeping.
#[derive(Debug, Clone)]
pub struct SlaveReplica {
    pub doc: DomDocument,
    session: String,
    seq: u64,
    last_master_seq: u64,
    awaiting_reset: bool,
}

impl SlaveReplica {
    pub fn new(doc: DomDocument, session: impl Into<String>) -> Self {
        SlaveReplica { doc, session: session.into(), seq: 0, last_master_seq: 0, awaiting_reset: false }
    }

    pub fn message(&mut self, payload: Payload) -> SyncMessage {
        self.seq += 1;
        SyncMessage::new(self.session.clone(), self.seq, payload)
    }

    pub fn hello(&mut self) -> SyncMessage {
        self.message(Payload::Hello(Hello { role: Role::Slave }))
    }

    pub fn awaiting_reset(&self) -> bool {
        self.awaiting_reset
    }

    pub fn last_master_seq(&self) -> u64 {
        self.last_master_seq
    }

    fn request_resync(&mut self) -> SlaveEvent {
        self.awaiting_reset = true;
        let last_seq = self.last_master_seq;
        SlaveEvent::Resync(self.message(Payload::Resync(Resync { last_seq })))
    }

    /// Re-sends the Resync request when a requested snapshot never arrived.
    /// Returns `None` when no snapshot is outstanding.
    pub fn retry_resync(&mut self) -> Option<SyncMessage> {
        if !self.awaiting_reset {
            return None;
        }
        let last_seq = self.last_master_seq;
        Some(self.message(Payload::Resync(Resync { last_seq })))
    }

    /// Handles one message from the master.
    pub fn receive(&mut self, msg: &SyncMessage) -> SlaveEvent {
        if let Payload::Hello(Hello { role: Role::Master }) = msg.payload {
            // A (re)connected master may have changed anything meanwhile.
            self.last_master_seq = msg.seq;
            return self.request_resync();
        }
        if msg.seq <= self.last_master_seq {
            return SlaveEvent::Ignored;
        }
        let Payload::Changes(changes) = &msg.payload else {
            self.last_master_seq = msg.seq;
            return SlaveEvent::Other;
        };
        if self.awaiting_reset {
            if !changes.reset {
                return SlaveEvent::Ignored;
            }
        } else if msg.seq != self.last_master_seq + 1 {
            tracing::debug!(expected = self.last_master_seq + 1, got = msg.seq, "sequence gap");
            return self.request_resync();
        }
        // Applied in place: a failure leads to a reset snapshot anyway.
        if changes.reset {
            reset_body(&mut self.doc);
        }
        match apply_changes(&mut self.doc, &changes.records) {
            Ok(()) => {
                self.last_master_seq = msg.seq;
                self.awaiting_reset = false;
                SlaveEvent::Applied
            }
            Err(e) => {
                tracing::debug!(error = %e, "desync");
                self.request_resync()
            }
        }
    }
}
