//! Deterministic in-process simulation of a hub with its master and slave
//! clients.
//!
//! A [`Scenario`] names a document, a mapping query and a script of timed
//! events. The document is split, the master and slave endpoints are wired to
//! a [`Relay`] through per-link queues, and every message crosses the links
//! as an encoded line. Faults (drop, duplicate, reorder) are injected on the
//! hub→slave link and only ever touch `changes` messages. The run ends with a
//! heartbeat barrier, after which the slave body is compared with the
//! projection of the master body.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use url::Url;

use crate::annotation::annotate;
use crate::dom::{parse_fragment, parse_html, DomDocument, DomError, Mutation, MutationRecord, NodeData, NodeId, ParseError};
use crate::mapping::{evaluate_query, GeometryTable, MappingOptions, MappingQuery};
use crate::protocol::{decode, encode, EventType, InteractionRecord, MasterEndpoint, Payload, SlaveEvent, SlaveReplica, SyncMessage};
use crate::splitter::{project, split, Role, SplitConfig, SplitError};

use super::relay::{Action, ConnId, Relay, SessionApp, DEFAULT_BUFFER_LIMIT};
use super::workload::MutationGenerator;

/// Upper bound on heartbeat rounds in the closing barrier.
const SETTLE_ROUNDS: usize = 32;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("malformed scenario: {0}")]
    Malformed(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario document: {0}")]
    Parse(#[from] ParseError),
    #[error("scenario {scenario}: {source}")]
    Split { scenario: String, source: SplitError },
    #[error("scenario {scenario}, event {event}: unknown node {node:?}")]
    UnknownNode { scenario: String, event: usize, node: String },
    #[error("scenario {scenario}, event {event}: {source}")]
    Mutation { scenario: String, event: usize, source: DomError },
    #[error("session {0}: the slave keeps failing to apply snapshots")]
    Livelock(String),
    #[error("message on the {link} link does not decode: {detail}")]
    Wire { link: String, detail: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DocumentSource {
    Html { html: String },
    /// Relative paths are resolved against the scenario file's directory.
    Path { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Seeds random mutations and unindexed faults.
    #[serde(default)]
    pub seed: u64,
    pub document: DocumentSource,
    #[serde(default)]
    pub base_url: Option<String>,
    pub query: MappingQuery,
    #[serde(default)]
    pub geometry: GeometryTable,
    #[serde(default)]
    pub region_threshold: Option<f64>,
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub expect: Expectations,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    /// Logical time; events run in `at` order, ties in script order.
    #[serde(default)]
    pub at: u64,
    #[serde(flatten)]
    pub action: EventAction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventAction {
    Connect {
        role: Role,
    },
    Disconnect {
        role: Role,
    },
    /// One batch of scripted master mutations, sent as one message.
    Mutate {
        mutations: Vec<MutationSpec>,
    },
    /// `count` generated master mutations, one message each.
    RandomMutations {
        count: usize,
    },
    /// A user interaction captured on the slave. When the master receives it,
    /// `effects` stand in for the handler the master would run.
    Interaction {
        node: String,
        event_type: EventType,
        #[serde(default)]
        detail: BTreeMap<String, Value>,
        #[serde(default)]
        effects: Vec<MutationSpec>,
    },
    /// A run-time split request, optionally preceded by fresh geometry.
    SplitRequest {
        query: MappingQuery,
        #[serde(default)]
        geometry: Option<GeometryTable>,
        #[serde(default = "default_requester")]
        from: Role,
    },
}

fn default_requester() -> Role {
    Role::Slave
}

/// A scripted mutation. Node references are `#html-id` or a node identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum MutationSpec {
    SetAttribute {
        node: String,
        name: String,
        value: String,
    },
    RemoveAttribute {
        node: String,
        name: String,
    },
    /// On a text node, its text; on an element, its whole content.
    SetText {
        node: String,
        text: String,
    },
    /// Inserts parsed `html` after `prev`; `"^"` means first, absent means last.
    Insert {
        parent: String,
        #[serde(default)]
        prev: Option<String>,
        html: String,
    },
    Remove {
        node: String,
    },
    Move {
        node: String,
        parent: String,
        #[serde(default)]
        prev: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Drop,
    Duplicate,
    /// Delivers the message after the next `changes` message.
    Reorder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    #[serde(rename = "type")]
    pub kind: FaultKind,
    /// Zero-based index among `changes` messages on the hub→slave link.
    /// Chosen with the scenario seed when absent.
    #[serde(default)]
    pub index: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    #[serde(default = "yes")]
    pub converged: bool,
    /// Text content of slave nodes.
    #[serde(default)]
    pub slave_text: BTreeMap<String, String>,
    /// Attribute values of slave nodes; `null` means absent.
    #[serde(default)]
    pub slave_attributes: BTreeMap<String, BTreeMap<String, Option<String>>>,
    #[serde(default)]
    pub slave_has: Vec<String>,
    #[serde(default)]
    pub slave_lacks: Vec<String>,
}

fn yes() -> bool {
    true
}

impl Default for Expectations {
    fn default() -> Self {
        Expectations {
            converged: true,
            slave_text: BTreeMap::new(),
            slave_attributes: BTreeMap::new(),
            slave_has: Vec::new(),
            slave_lacks: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, SimulationError> {
        serde_json::from_str(text).map_err(|e| SimulationError::Malformed(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Scenario, SimulationError> {
        let text = fs::read_to_string(path).map_err(|source| SimulationError::Io { path: path.to_path_buf(), source })?;
        let mut scenario = Scenario::from_json(&text)?;
        scenario.base_dir = path.parent().map(Path::to_path_buf);
        if scenario.name.is_empty() {
            scenario.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(scenario)
    }

    pub fn document_html(&self) -> Result<String, SimulationError> {
        match &self.document {
            DocumentSource::Html { html } => Ok(html.clone()),
            DocumentSource::Path { path } => {
                let full = match &self.base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                fs::read_to_string(&full).map_err(|source| SimulationError::Io { path: full, source })
            }
        }
    }

    fn options(&self) -> MappingOptions {
        let mut options = MappingOptions::default();
        if let Some(t) = self.region_threshold {
            options.region_threshold = t;
        }
        options
    }
}

/// One delivered (or faulted) message.
#[derive(Debug, Clone, Serialize)]
pub struct TranscriptEntry {
    pub step: u64,
    pub at: u64,
    pub session: String,
    pub from: String,
    pub to: String,
    pub kind: String,
    pub seq: u64,
    pub message: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultKind>,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub name: String,
    pub session: String,
    pub transcript: Vec<TranscriptEntry>,
    pub master: DomDocument,
    pub slave: DomDocument,
    /// The slave document right after the split, before any event.
    pub initial_slave: DomDocument,
    pub converged: bool,
    pub resyncs: usize,
    pub faults: Vec<(FaultKind, usize)>,
    pub relay_errors: Vec<String>,
    pub failures: Vec<String>,
}

impl SimulationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "scenario": self.name,
            "session": self.session,
            "result": if self.passed() { "PASS" } else { "FAIL" },
            "converged": self.converged,
            "resyncs": self.resyncs,
            "faults": self.faults.iter().map(|(k, i)| serde_json::json!({"type": k, "index": i})).collect::<Vec<_>>(),
            "relay_errors": self.relay_errors,
            "failures": self.failures,
            "messages": self.transcript,
        })
    }
}

/// Runs one scenario.
pub fn simulate(scenario: &Scenario) -> Result<SimulationReport, SimulationError> {
    Ok(simulate_sessions(std::slice::from_ref(scenario))?.remove(0))
}

/// Runs several scenarios as concurrent sessions on one relay. Events of all
/// sessions are merged by time.
pub fn simulate_sessions(scenarios: &[Scenario]) -> Result<Vec<SimulationReport>, SimulationError> {
    let mut plans: Vec<Vec<(FaultKind, usize)>> = vec![Vec::new(); scenarios.len()];
    let mut unresolved = false;
    for (plan, s) in plans.iter_mut().zip(scenarios) {
        for f in &s.faults {
            match f.index {
                Some(i) => plan.push((f.kind, i)),
                None => unresolved = true,
            }
        }
    }
    if unresolved {
        // Count the changes messages a fault-free run delivers to each slave
        // and pick indices among them.
        let counts: Vec<usize> = World::new(scenarios, vec![Vec::new(); scenarios.len()])?
            .run()?
            .iter()
            .map(|s| s.changes_to_slave)
            .collect();
        for ((plan, s), n) in plans.iter_mut().zip(scenarios).zip(counts) {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed_fa17);
            for f in s.faults.iter().filter(|f| f.index.is_none()) {
                if n > 0 {
                    plan.push((f.kind, rng.gen_range(0..n)));
                }
            }
        }
    }
    let sessions = World::new(scenarios, plans)?.run()?;
    Ok(sessions.into_iter().zip(scenarios).map(|(s, sc)| s.report(sc)).collect())
}

/// Concatenated text of a subtree.
pub fn text_content(doc: &DomDocument, id: &NodeId) -> String {
    doc.descendants(id)
        .iter()
        .filter_map(|n| match &doc.node(n)?.data {
            NodeData::Text(t) => Some(t.as_str()),
            _ => None,
        })
        .collect()
}

/// Canonical forms of the body children: the content the mirror carries.
pub fn body_content(doc: &DomDocument) -> Vec<String> {
    doc.body().map(|b| doc.children(&b).iter().map(|c| doc.canonical_subtree(c)).collect()).unwrap_or_default()
}

/// Whether the slave body mirrors exactly the projection of the master body.
pub fn mirrors(master: &DomDocument, slave: &DomDocument) -> bool {
    project(master).is_some_and(|p| body_content(&p) == body_content(slave))
}

#[derive(Debug, Default)]
struct Link {
    conn: Option<ConnId>,
    to_hub: VecDeque<String>,
    from_hub: VecDeque<String>,
}

struct PendingInteraction {
    node: NodeId,
    event_type: EventType,
    effects: Vec<MutationSpec>,
    event: usize,
}

struct SessionSim {
    name: String,
    session: String,
    master: MasterEndpoint,
    slave: SlaveReplica,
    initial_slave: DomDocument,
    links: [Link; 2],
    generator: MutationGenerator,
    pending: Vec<PendingInteraction>,
    faults: Vec<(FaultKind, usize)>,
    applied_faults: Vec<(FaultKind, usize)>,
    held: Option<String>,
    changes_to_slave: usize,
    resyncs: usize,
    /// Resyncs since the slave last applied a message.
    failed_resyncs: usize,
    relay_errors: Vec<String>,
    transcript: Vec<TranscriptEntry>,
}

fn slot(role: Role) -> usize {
    match role {
        Role::Master => 0,
        Role::Slave => 1,
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Master => "master",
        Role::Slave => "slave",
    }
}

impl SessionSim {
    fn new(index: usize, scenario: &Scenario, faults: Vec<(FaultKind, usize)>) -> Result<Self, SimulationError> {
        let name = if scenario.name.is_empty() { format!("scenario-{index}") } else { scenario.name.clone() };
        let session = scenario.session.clone().unwrap_or_else(|| format!("sim-{index}-{}", scenario.seed));
        let base = match &scenario.base_url {
            Some(u) => Some(Url::parse(u).map_err(|e| SimulationError::Malformed(format!("base_url: {e}")))?),
            None => None,
        };
        let doc = parse_html(scenario.document_html()?.as_bytes(), base)?;
        let split_err = |source: SplitError| SimulationError::Split { scenario: name.clone(), source };
        let geometry = scenario.geometry.resolve_html_ids(&doc).map_err(|e| split_err(e.into()))?;
        let lists = evaluate_query(&doc, &scenario.query, &geometry, &scenario.options())
            .map_err(|e| split_err(e.into()))?;
        let annotated = annotate(&doc, &lists).map_err(|e| split_err(e.into()))?;
        let config = SplitConfig { session_id: Some(session.clone()), ..SplitConfig::default() };
        let result = split(&annotated, &config).map_err(split_err)?;
        let master = MasterEndpoint::new(result.master.clone(), session.clone())
            .ok_or_else(|| SimulationError::Malformed("split master has no body".into()))?;
        let slave = SlaveReplica::new(result.slave.clone(), session.clone());
        Ok(SessionSim {
            name,
            session,
            master,
            initial_slave: result.slave,
            slave,
            links: [Link::default(), Link::default()],
            generator: MutationGenerator::new(ChaCha8Rng::seed_from_u64(scenario.seed)),
            pending: Vec::new(),
            faults,
            applied_faults: Vec::new(),
            held: None,
            changes_to_slave: 0,
            resyncs: 0,
            failed_resyncs: 0,
            relay_errors: Vec::new(),
            transcript: Vec::new(),
        })
    }

    fn app(&self, scenario: &Scenario) -> Result<SessionApp, SimulationError> {
        Ok(SessionApp {
            master: self.master.doc.clone(),
            split: crate::splitter::SplitResult {
                master: self.master.doc.clone(),
                slave: self.initial_slave.clone(),
                session_id: self.session.clone(),
                manifest: crate::splitter::Manifest {
                    session: self.session.clone(),
                    hidden_count: 0,
                    mirrored_count: 0,
                    shared_count: 0,
                },
            },
            config: SplitConfig { session_id: Some(self.session.clone()), ..SplitConfig::default() },
            options: scenario.options(),
            geometry: scenario.geometry.resolve_html_ids(&self.master.doc).map_err(|e| SimulationError::Split {
                scenario: self.name.clone(),
                source: e.into(),
            })?,
        })
    }

    /// Queues a message from a client towards the hub, if the client is connected.
    fn send(&mut self, role: Role, msg: &SyncMessage) {
        let link = &mut self.links[slot(role)];
        if link.conn.is_some() {
            link.to_hub.push_back(encode(msg));
        }
    }

    fn report(self, scenario: &Scenario) -> SimulationReport {
        let converged = mirrors(&self.master.doc, &self.slave.doc);
        let mut failures = Vec::new();
        let expect = &scenario.expect;
        if converged != expect.converged {
            failures.push(if converged {
                "slave converged but the scenario expects divergence".to_string()
            } else {
                "slave content does not match the projection of the master".to_string()
            });
        }
        let slave = &self.slave.doc;
        let find = |r: &str| resolve(slave, r);
        for (r, want) in &expect.slave_text {
            match find(r) {
                Some(id) => {
                    let got = text_content(slave, &id);
                    if &got != want {
                        failures.push(format!("slave text of {r}: expected {want:?}, found {got:?}"));
                    }
                }
                None => failures.push(format!("slave has no node {r}")),
            }
        }
        for (r, attrs) in &expect.slave_attributes {
            let Some(id) = find(r) else {
                failures.push(format!("slave has no node {r}"));
                continue;
            };
            for (name, want) in attrs {
                let got = slave.attr(&id, name);
                if got != want.as_deref() {
                    failures.push(format!("slave attribute {name} of {r}: expected {want:?}, found {got:?}"));
                }
            }
        }
        for r in &expect.slave_has {
            if find(r).is_none() {
                failures.push(format!("slave has no node {r}"));
            }
        }
        for r in &expect.slave_lacks {
            if find(r).is_some() {
                failures.push(format!("slave unexpectedly has node {r}"));
            }
        }
        SimulationReport {
            name: self.name,
            session: self.session,
            transcript: self.transcript,
            master: self.master.doc,
            slave: self.slave.doc,
            initial_slave: self.initial_slave,
            converged,
            resyncs: self.resyncs,
            faults: self.applied_faults,
            relay_errors: self.relay_errors,
            failures,
        }
    }
}

fn resolve(doc: &DomDocument, reference: &str) -> Option<NodeId> {
    match reference.strip_prefix('#') {
        Some(html_id) => doc.find_by_html_id(html_id),
        None => {
            let id = NodeId::new(reference);
            doc.contains(&id).then_some(id)
        }
    }
}

/// Resolves a scripted mutation against `doc`. Inserts expand to one
/// mutation per parsed top-level node, so they are applied one at a time.
fn apply_spec(doc: &mut DomDocument, spec: &MutationSpec, out: &mut Vec<MutationRecord>) -> Result<(), SpecError> {
    let node = |doc: &DomDocument, r: &str| resolve(doc, r).ok_or_else(|| SpecError::Unknown(r.to_string()));
    let prev = |doc: &DomDocument, parent: &NodeId, r: &Option<String>| -> Result<Option<NodeId>, SpecError> {
        match r.as_deref() {
            None => Ok(doc.children(parent).last().cloned()),
            Some("^") => Ok(None),
            Some(r) => node(doc, r).map(Some),
        }
    };
    fn run(doc: &mut DomDocument, m: Mutation, out: &mut Vec<MutationRecord>) -> Result<(), SpecError> {
        out.extend(doc.mutate(m).map_err(SpecError::Dom)?);
        Ok(())
    }
    match spec {
        MutationSpec::SetAttribute { node: n, name, value } => {
            let m = Mutation::SetAttribute { node: node(doc, n)?, name: name.clone(), value: value.clone() };
            run(doc, m, out)
        }
        MutationSpec::RemoveAttribute { node: n, name } => {
            let m = Mutation::RemoveAttribute { node: node(doc, n)?, name: name.clone() };
            run(doc, m, out)
        }
        MutationSpec::SetText { node: n, text } => {
            let n = node(doc, n)?;
            if !doc.is_element(&n) {
                return run(doc, Mutation::SetText { node: n, text: text.clone() }, out);
            }
            // On an element this replaces the content, like `textContent`.
            match doc.children(&n).to_vec().as_slice() {
                [only] if matches!(doc.node(only).map(|c| &c.data), Some(NodeData::Text(_))) => {
                    let only = only.clone();
                    run(doc, Mutation::SetText { node: only, text: text.clone() }, out)
                }
                children => {
                    for c in children {
                        run(doc, Mutation::RemoveNode { node: c.clone() }, out)?;
                    }
                    let fragment = crate::dom::Fragment::text(text.clone());
                    run(doc, Mutation::InsertNode { parent: n, prev: None, node: fragment }, out)
                }
            }
        }
        MutationSpec::Remove { node: n } => {
            let m = Mutation::RemoveNode { node: node(doc, n)? };
            run(doc, m, out)
        }
        MutationSpec::Move { node: n, parent, prev: p } => {
            let n = node(doc, n)?;
            let parent = node(doc, parent)?;
            let prev = prev(doc, &parent, p)?;
            run(doc, Mutation::MoveNode { node: n, parent, prev }, out)
        }
        MutationSpec::Insert { parent, prev: p, html } => {
            let parent = node(doc, parent)?;
            let context = doc.tag(&parent).unwrap_or("body").to_string();
            let mut after = prev(doc, &parent, p)?;
            for fragment in parse_fragment(html, &context) {
                let before = out.len();
                run(doc, Mutation::InsertNode { parent: parent.clone(), prev: after.clone(), node: fragment }, out)?;
                after = out[before..].first().map(|r| r.node().clone());
            }
            Ok(())
        }
    }
}

enum SpecError {
    Unknown(String),
    Dom(DomError),
}

/// The whole simulated system: one relay, many sessions.
struct World<'a> {
    scenarios: &'a [Scenario],
    relay: Relay,
    sessions: Vec<SessionSim>,
    owners: BTreeMap<ConnId, (usize, Role)>,
    next_conn: ConnId,
    step: u64,
    now: u64,
}

impl<'a> World<'a> {
    fn new(scenarios: &'a [Scenario], plans: Vec<Vec<(FaultKind, usize)>>) -> Result<Self, SimulationError> {
        let mut relay = Relay::new(DEFAULT_BUFFER_LIMIT);
        let mut sessions = Vec::new();
        for (i, (scenario, plan)) in scenarios.iter().zip(plans).enumerate() {
            let sim = SessionSim::new(i, scenario, plan)?;
            if sessions.iter().any(|s: &SessionSim| s.session == sim.session) {
                return Err(SimulationError::Malformed(format!("session id {} used twice", sim.session)));
            }
            relay.register(&sim.session, sim.app(scenario)?);
            sessions.push(sim);
        }
        Ok(World { scenarios, relay, sessions, owners: BTreeMap::new(), next_conn: 1, step: 0, now: 0 })
    }

    fn run(mut self) -> Result<Vec<SessionSim>, SimulationError> {
        let mut timeline: Vec<(u64, usize, usize)> = Vec::new();
        for (si, s) in self.scenarios.iter().enumerate() {
            for (ei, e) in s.events.iter().enumerate() {
                timeline.push((e.at, si, ei));
            }
        }
        timeline.sort();
        for (at, si, ei) in timeline {
            self.now = at;
            let action = self.scenarios[si].events[ei].action.clone();
            self.event(si, ei, &action)?;
            self.pump()?;
        }
        self.settle()?;
        Ok(self.sessions)
    }

    fn event(&mut self, si: usize, ei: usize, action: &EventAction) -> Result<(), SimulationError> {
        let name = self.sessions[si].name.clone();
        let spec_err = |e: SpecError| match e {
            SpecError::Unknown(node) => SimulationError::UnknownNode { scenario: name.clone(), event: ei, node },
            SpecError::Dom(source) => SimulationError::Mutation { scenario: name.clone(), event: ei, source },
        };
        match action {
            EventAction::Connect { role } => {
                let conn = self.next_conn;
                self.next_conn += 1;
                let s = &mut self.sessions[si];
                let link = &mut s.links[slot(*role)];
                if link.conn.is_some() {
                    return Err(SimulationError::Malformed(format!(
                        "{name}: event {ei} connects the {} twice",
                        role_name(*role)
                    )));
                }
                link.conn = Some(conn);
                self.owners.insert(conn, (si, *role));
                let hello = match role {
                    Role::Master => s.master.hello(),
                    Role::Slave => s.slave.hello(),
                };
                s.send(*role, &hello);
            }
            EventAction::Disconnect { role } => {
                let link = &mut self.sessions[si].links[slot(*role)];
                if let Some(conn) = link.conn.take() {
                    link.to_hub.clear();
                    link.from_hub.clear();
                    self.relay.disconnect(conn);
                    self.owners.remove(&conn);
                }
            }
            EventAction::Mutate { mutations } => {
                let s = &mut self.sessions[si];
                let mut records = Vec::new();
                for spec in mutations {
                    apply_spec(&mut s.master.doc, spec, &mut records).map_err(spec_err)?;
                }
                self.master_changed(si, records, ei)?;
            }
            EventAction::RandomMutations { count } => {
                for _ in 0..*count {
                    let s = &mut self.sessions[si];
                    let m = s.generator.next(&s.master.doc);
                    let outgoing = s.master.mutate([m]).map_err(|source| SimulationError::Mutation {
                        scenario: name.clone(),
                        event: ei,
                        source,
                    })?;
                    if let Some(msg) = outgoing {
                        s.send(Role::Master, &msg);
                    }
                    self.pump()?;
                }
            }
            EventAction::Interaction { node, event_type, detail, effects } => {
                let s = &mut self.sessions[si];
                let id = resolve(&s.slave.doc, node)
                    .or_else(|| resolve(&s.master.doc, node))
                    .ok_or_else(|| SimulationError::UnknownNode { scenario: name.clone(), event: ei, node: node.clone() })?;
                s.pending.push(PendingInteraction { node: id.clone(), event_type: *event_type, effects: effects.clone(), event: ei });
                let record = InteractionRecord { node: id, event_type: *event_type, detail: detail.clone() };
                let msg = s.slave.message(Payload::Interaction(record));
                s.send(Role::Slave, &msg);
            }
            EventAction::SplitRequest { query, geometry, from } => {
                let s = &mut self.sessions[si];
                let endpoint_msg = |s: &mut SessionSim, payload: Payload| match from {
                    Role::Master => s.master.message(payload),
                    Role::Slave => s.slave.message(payload),
                };
                if let Some(g) = geometry {
                    let msg = endpoint_msg(s, Payload::Geometry(g.clone()));
                    s.send(*from, &msg);
                }
                let msg = endpoint_msg(s, Payload::SplitRequest(query.clone()));
                s.send(*from, &msg);
            }
        }
        Ok(())
    }

    /// Mirrors already applied master records.
    fn master_changed(&mut self, si: usize, records: Vec<MutationRecord>, ei: usize) -> Result<(), SimulationError> {
        let s = &mut self.sessions[si];
        let changes = s.master.publish(&records).map_err(|source| SimulationError::Mutation {
            scenario: s.name.clone(),
            event: ei,
            source,
        })?;
        if let Some(msg) = changes {
            s.send(Role::Master, &msg);
        }
        Ok(())
    }

    /// Delivers queued messages round-robin until every link is idle.
    fn pump(&mut self) -> Result<(), SimulationError> {
        loop {
            let mut progressed = false;
            for si in 0..self.sessions.len() {
                for role in [Role::Master, Role::Slave] {
                    progressed |= self.deliver_to_hub(si, role)?;
                    progressed |= self.deliver_to_client(si, role)?;
                }
            }
            if !progressed {
                // A message held back for reordering with nothing to pass it.
                let mut released = false;
                for s in &mut self.sessions {
                    if let Some(line) = s.held.take() {
                        s.links[1].from_hub.push_back(line);
                        released = true;
                    }
                }
                if !released {
                    return Ok(());
                }
            }
        }
    }

    fn log(&mut self, si: usize, from: &str, to: &str, line: &str, fault: Option<FaultKind>) -> Result<SyncMessage, SimulationError> {
        let msg = decode(line.as_bytes()).map_err(|e| SimulationError::Wire { link: format!("{from}->{to}"), detail: e.to_string() })?;
        self.step += 1;
        let message = serde_json::from_str(line).unwrap_or(Value::Null);
        self.sessions[si].transcript.push(TranscriptEntry {
            step: self.step,
            at: self.now,
            session: msg.session.clone(),
            from: from.into(),
            to: to.into(),
            kind: msg.kind().as_str().into(),
            seq: msg.seq,
            message,
            fault,
        });
        Ok(msg)
    }

    fn deliver_to_hub(&mut self, si: usize, role: Role) -> Result<bool, SimulationError> {
        let s = &mut self.sessions[si];
        let link = &mut s.links[slot(role)];
        let Some(line) = link.to_hub.pop_front() else {
            return Ok(false);
        };
        let Some(conn) = link.conn else {
            return Ok(true);
        };
        self.log(si, role_name(role), "hub", &line, None)?;
        match self.relay.receive(conn, &line) {
            Ok(actions) => self.route(actions)?,
            Err(e) => {
                tracing::debug!(error = %e, "relay rejected a message");
                self.sessions[si].relay_errors.push(e.to_string());
            }
        }
        // The relay may have updated its copy on a split request; nothing to do here.
        Ok(true)
    }

    fn route(&mut self, actions: Vec<Action>) -> Result<(), SimulationError> {
        for action in actions {
            match action {
                Action::Send { conn, line } => {
                    let Some(&(si, role)) = self.owners.get(&conn) else { continue };
                    self.enqueue_from_hub(si, role, line)?;
                }
                Action::Close { conn } => {
                    if let Some((si, role)) = self.owners.remove(&conn) {
                        self.sessions[si].links[slot(role)].conn = None;
                    }
                }
            }
        }
        Ok(())
    }

    fn enqueue_from_hub(&mut self, si: usize, role: Role, line: String) -> Result<(), SimulationError> {
        let is_changes = role == Role::Slave && line.contains("\"kind\":\"changes\"");
        if !is_changes {
            self.sessions[si].links[slot(role)].from_hub.push_back(line);
            return Ok(());
        }
        let s = &mut self.sessions[si];
        let index = s.changes_to_slave;
        s.changes_to_slave += 1;
        let fault = s.faults.iter().find(|(_, i)| *i == index).map(|(k, _)| *k);
        let held = s.held.take();
        match fault {
            None => s.links[1].from_hub.push_back(line),
            Some(kind) => {
                s.applied_faults.push((kind, index));
                match kind {
                    FaultKind::Drop => {
                        self.log(si, "hub", "slave", &line, Some(kind))?;
                    }
                    FaultKind::Duplicate => {
                        s.links[1].from_hub.push_back(line.clone());
                        s.links[1].from_hub.push_back(line);
                    }
                    FaultKind::Reorder => s.held = Some(line),
                }
            }
        }
        let s = &mut self.sessions[si];
        if let Some(earlier) = held {
            s.links[1].from_hub.push_back(earlier);
        }
        Ok(())
    }

    fn deliver_to_client(&mut self, si: usize, role: Role) -> Result<bool, SimulationError> {
        let Some(line) = self.sessions[si].links[slot(role)].from_hub.pop_front() else {
            return Ok(false);
        };
        let msg = self.log(si, "hub", role_name(role), &line, None)?;
        let s = &mut self.sessions[si];
        match role {
            Role::Master => {
                if let Payload::Interaction(record) = &msg.payload {
                    return self.interaction(si, record).map(|_| true);
                }
                let replies = s.master.receive(&msg).map_err(|source| SimulationError::Mutation {
                    scenario: s.name.clone(),
                    event: usize::MAX,
                    source,
                })?;
                for reply in replies {
                    s.send(Role::Master, &reply);
                }
            }
            Role::Slave => {
                match s.slave.receive(&msg) {
                    SlaveEvent::Resync(request) => {
                        s.resyncs += 1;
                        s.failed_resyncs += 1;
                        if s.failed_resyncs > SETTLE_ROUNDS {
                            return Err(SimulationError::Livelock(s.session.clone()));
                        }
                        s.send(Role::Slave, &request);
                    }
                    SlaveEvent::Applied => s.failed_resyncs = 0,
                    _ => {}
                }
            }
        }
        Ok(true)
    }

    /// Runs the scripted handler of an interaction on the master.
    fn interaction(&mut self, si: usize, record: &InteractionRecord) -> Result<(), SimulationError> {
        let s = &mut self.sessions[si];
        let Some(pos) = s.pending.iter().position(|p| p.node == record.node && p.event_type == record.event_type) else {
            return Ok(());
        };
        let pending = s.pending.remove(pos);
        if !s.master.doc.contains(&record.node) {
            tracing::debug!(node = %record.node, "interaction target gone on the master");
            return Ok(());
        }
        let mut records = Vec::new();
        for spec in &pending.effects {
            apply_spec(&mut s.master.doc, spec, &mut records).map_err(|e| match e {
                SpecError::Unknown(node) => SimulationError::UnknownNode { scenario: s.name.clone(), event: pending.event, node },
                SpecError::Dom(source) => SimulationError::Mutation { scenario: s.name.clone(), event: pending.event, source },
            })?;
        }
        self.master_changed(si, records, pending.event)
    }

    /// Heartbeat barrier: lets every paired slave notice trailing losses and
    /// finish outstanding resyncs.
    fn settle(&mut self) -> Result<(), SimulationError> {
        self.pump()?;
        for _ in 0..SETTLE_ROUNDS {
            let mut active = false;
            let before: Vec<usize> = self.sessions.iter().map(|s| s.resyncs).collect();
            for s in &mut self.sessions {
                if s.links.iter().any(|l| l.conn.is_none()) {
                    continue;
                }
                active = true;
                match s.slave.retry_resync() {
                    Some(request) => s.send(Role::Slave, &request),
                    None => {
                        let beat = s.master.heartbeat();
                        s.send(Role::Master, &beat);
                    }
                }
            }
            if !active {
                break;
            }
            self.pump()?;
            let quiet = self
                .sessions
                .iter()
                .zip(&before)
                .all(|(s, b)| s.resyncs == *b && !s.slave.awaiting_reset());
            if quiet {
                break;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAGE: &str = r#"<!DOCTYPE html><html><head><title>t</title></head><body>
<div id="player"><video id="v" src="movie.mp4"></video><p id="cap">caption one</p></div>
<button id="like">Like</button><p id="info">details</p></body></html>"#;

    fn scenario(events: &str, faults: &str) -> Scenario {
        let json = format!(
            r#"{{"name":"t","seed":7,"document":{{"html":{}}},"base_url":"http://example.test/",
               "query":{{"op":"leaf","criterion":{{"kind":"semantic","classes":["interactive","multimedia"]}}}},
               "events":{events},"faults":{faults}}}"#,
            serde_json::to_string(PAGE).unwrap()
        );
        Scenario::from_json(&json).unwrap()
    }

    const PAIR: &str = r#"{"at":0,"type":"connect","role":"master"},{"at":0,"type":"connect","role":"slave"}"#;

    #[test]
    fn empty_scenario_has_empty_transcript() {
        let r = simulate(&scenario("[]", "[]")).unwrap();
        assert!(r.transcript.is_empty());
        assert!(r.converged);
        assert_eq!(body_content(&r.slave), body_content(&r.initial_slave));
    }

    #[test]
    fn scripted_mutations_mirror() {
        let events = format!(
            r##"[{PAIR},{{"at":1,"type":"mutate","mutations":[{{"op":"set_attribute","node":"#v","name":"poster","value":"p.png"}},
               {{"op":"insert","parent":"#player","html":"<span id=\"n\">new</span>"}}]}}]"##
        );
        let r = simulate(&scenario(&events, "[]")).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
        let v = r.slave.find_by_html_id("v").unwrap();
        assert_eq!(r.slave.attr(&v, "poster"), Some("http://example.test/p.png"));
    }

    #[test]
    fn dropped_message_recovers() {
        let events = format!(r#"[{PAIR},{{"at":1,"type":"random_mutations","count":30}}]"#);
        let r = simulate(&scenario(&events, r#"[{"type":"drop"}]"#)).unwrap();
        assert_eq!(r.faults.len(), 1);
        assert!(r.converged, "{:?}", r.failures);
        assert!(r.resyncs >= 1);
    }

    #[test]
    fn wrong_expectation_fails() {
        let mut s = scenario(&format!("[{PAIR}]"), "[]");
        s.expect.slave_text.insert("#cap".into(), "something else".into());
        let r = simulate(&s).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn malformed_scenario_is_rejected() {
        assert!(matches!(Scenario::from_json(r#"{"document":{}}"#), Err(SimulationError::Malformed(_))));
    }
}
