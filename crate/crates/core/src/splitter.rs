//! Virtual splitting of an annotated document into a master and a slave.
//!
//! The master is the annotated document itself with `device2` content hidden
//! by one injected CSS rule. The slave is rebuilt from scratch: it holds the
//! *projection* of the master, i.e. every body node whose assignment is
//! `device2` or `dev1&dev2`, without application scripts or inline handlers.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::annotation::{
    annotate, assignment, effective_assignment, validate_annotation, AnnotationError,
    DeviceAssignment, Violation, DEVICE_ATTR,
};
use crate::dom::{
    Attributes, DomDocument, DomError, Element, Fragment, Mutation, NodeData, NodeId,
};
use crate::mapping::{evaluate_query, GeometryTable, MappingError, MappingOptions, MappingQuery};
use crate::protocol::{ChangeRecord, MirrorTracker};

pub const HIDE_STYLE_ID: &str = "vs-hide";
pub const CONFIG_ID: &str = "vs-config";
pub const RUNTIME_ID: &str = "vs-runtime";
pub const HIDE_RULE: &str = r#"[data-device="device2"]{display:none !important}"#;

/// Attributes whose values are resolved against the base URL on the slave.
pub const URL_ATTRIBUTES: &[&str] = &["src", "href", "srcset", "poster", "data"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitConfig {
    pub runtime_master_url: String,
    pub runtime_slave_url: String,
    pub hub_url: String,
    /// Fixed session id; a random one is generated when absent.
    pub session_id: Option<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            runtime_master_url: "/runtime/master.js".into(),
            runtime_slave_url: "/runtime/slave.js".into(),
            hub_url: "ws://127.0.0.1:8080/sync".into(),
            session_id: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Master,
    Slave,
}

/// Contents of the injected `vs-config` element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub session: String,
    pub hub: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub session: String,
    pub hidden_count: usize,
    pub mirrored_count: usize,
    pub shared_count: usize,
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub master: DomDocument,
    pub slave: DomDocument,
    pub session_id: String,
    pub manifest: Manifest,
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("annotation is invalid: {}", join(.0))]
    InvalidAnnotation(Vec<Violation>),
    #[error("content that should be visible on the primary device sits inside hidden content: nodes {}", join(.0))]
    UnreachableContent(Vec<NodeId>),
    #[error("relative URLs in slave-bound content need a base URL: nodes {}", join(.0))]
    MissingBaseUrl(Vec<NodeId>),
    #[error("document has no {0} element")]
    MissingScaffold(&'static str),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Dom(#[from] DomError),
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

pub fn generate_session_id() -> String {
    let mut rng = rand::thread_rng();
    (0..16).map(|_| format!("{:x}", rng.gen_range(0..16u8))).collect()
}

fn is_instrumentation(doc: &DomDocument, id: &NodeId) -> bool {
    matches!(doc.attr(id, "id"), Some(HIDE_STYLE_ID | CONFIG_ID | RUNTIME_ID))
}

fn is_url_attribute(name: &str) -> bool {
    URL_ATTRIBUTES.contains(&name)
}

/// Values that never need a base: empty and same-document references.
fn is_local_reference(value: &str) -> bool {
    let v = value.trim();
    v.is_empty() || v.starts_with('#')
}

fn is_relative(value: &str) -> bool {
    !is_local_reference(value)
        && matches!(Url::parse(value.trim()), Err(url::ParseError::RelativeUrlWithoutBase))
}

fn srcset_urls(value: &str) -> impl Iterator<Item = &str> {
    value
        .split(',')
        .filter_map(|candidate| candidate.split_whitespace().next())
}

/// Whether the attribute holds a URL that can only be resolved with a base.
pub fn needs_base(name: &str, value: &str) -> bool {
    match name {
        "srcset" => srcset_urls(value).any(is_relative),
        n if is_url_attribute(n) => is_relative(value),
        _ => false,
    }
}

fn resolve(value: &str, base: &Url) -> String {
    if is_local_reference(value) {
        return value.to_string();
    }
    base.join(value.trim())
        .map(String::from)
        .unwrap_or_else(|_| value.to_string())
}

fn absolutize(name: &str, value: &str, base: Option<&Url>) -> String {
    let Some(base) = base else {
        return value.to_string();
    };
    if name == "srcset" {
        return value
            .split(',')
            .map(|candidate| {
                let mut parts = candidate.split_whitespace();
                match parts.next() {
                    Some(url) => std::iter::once(resolve(url, base))
                        .chain(parts.map(str::to_string))
                        .collect::<Vec<_>>()
                        .join(" "),
                    None => String::new(),
                }
            })
            .collect::<Vec<_>>()
            .join(", ");
    }
    resolve(value, base)
}

/// How an attribute of the master appears on the slave: inline handlers and
/// device annotations are dropped, URLs are absolutized.
pub fn slave_attribute(name: &str, value: &str, base: Option<&Url>) -> Option<String> {
    if name.starts_with("on") || name == DEVICE_ATTR {
        None
    } else if is_url_attribute(name) {
        Some(absolutize(name, value, base))
    } else {
        Some(value.to_string())
    }
}

pub fn slave_attributes(attributes: &Attributes, base: Option<&Url>) -> Attributes {
    attributes
        .iter()
        .filter_map(|(n, v)| slave_attribute(n, v, base).map(|v| (n.to_string(), v)))
        .collect()
}

fn slave_data(data: &NodeData, base: Option<&Url>) -> NodeData {
    match data {
        NodeData::Element(e) => NodeData::Element(Element {
            tag: e.tag.clone(),
            attributes: slave_attributes(&e.attributes, base),
        }),
        other => other.clone(),
    }
}

/// The slave body content that a master document implies.
#[derive(Debug, Clone)]
pub struct Projection {
    pub body: NodeId,
    /// Slave children of each mirrored node (and of the body), in order.
    pub children: HashMap<NodeId, Vec<NodeId>>,
    /// Slave-side data of each mirrored node and of the body.
    pub data: HashMap<NodeId, NodeData>,
}

impl Projection {
    pub fn of(master: &DomDocument) -> Option<Projection> {
        let body = master.body()?;
        let base = master.base_url();
        let mut projection = Projection {
            body: body.clone(),
            children: HashMap::new(),
            data: HashMap::new(),
        };
        projection.data.insert(body.clone(), slave_data(&master.node(&body)?.data, base));
        projection.children.insert(body.clone(), Vec::new());
        let eff = effective_assignment(master, &body).unwrap_or(DeviceAssignment::Both);
        projection.walk(master, &body, eff, &body, base);
        Some(projection)
    }

    fn walk(
        &mut self,
        doc: &DomDocument,
        node: &NodeId,
        eff: DeviceAssignment,
        slave_parent: &NodeId,
        base: Option<&Url>,
    ) {
        for c in doc.children(node) {
            let Some(child) = doc.node(c) else { continue };
            let child_eff = match child.tag() {
                Some("script") => continue,
                Some(_) => assignment(doc, c).unwrap_or(eff),
                None => eff,
            };
            if child_eff.on_slave() {
                self.children.entry(slave_parent.clone()).or_default().push(c.clone());
                self.data.insert(c.clone(), slave_data(&child.data, base));
                if child.tag().is_some() {
                    self.children.insert(c.clone(), Vec::new());
                    self.walk(doc, c, child_eff, c, base);
                }
            } else if child.tag().is_some() {
                self.walk(doc, c, child_eff, &self.body.clone(), base);
            }
        }
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.data.contains_key(id)
    }

    pub fn children_of(&self, id: &NodeId) -> &[NodeId] {
        self.children.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Mirrored nodes in slave pre-order, body excluded.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack: Vec<&NodeId> = self.children_of(&self.body).iter().rev().collect();
        while let Some(n) = stack.pop() {
            out.push(n.clone());
            stack.extend(self.children_of(n).iter().rev());
        }
        out
    }

    /// The subtree at `id` as a fragment, leaving out nodes for which `skip` holds.
    pub fn fragment(&self, id: &NodeId, skip: &dyn Fn(&NodeId) -> bool) -> Fragment {
        Fragment {
            id: Some(id.clone()),
            data: self.data[id].clone(),
            children: self
                .children_of(id)
                .iter()
                .filter(|c| !skip(c))
                .map(|c| self.fragment(c, skip))
                .collect(),
        }
    }
}

/// Builds the slave-side view of the master's body: a scaffold with the
/// master's html/head/body identities and the projected body content.
pub fn project(master: &DomDocument) -> Option<DomDocument> {
    let projection = Projection::of(master)?;
    let head = master.head()?;
    let root = Fragment {
        id: Some(master.root().clone()),
        data: NodeData::element("html", Attributes::new()),
        children: vec![
            Fragment { id: Some(head), data: NodeData::element("head", Attributes::new()), children: vec![] },
            projection.fragment(&projection.body, &|_| false),
        ],
    };
    let mut doc = DomDocument::from_fragment(root, master.next_id()).ok()?;
    doc.set_base_url(master.base_url().cloned());
    Some(doc)
}

/// Elements that are not `device2` but sit under a `device2` ancestor: they
/// would be hidden on the master without being present on the slave.
fn unreachable_content(doc: &DomDocument) -> Vec<NodeId> {
    let Some(body) = doc.body() else {
        return Vec::new();
    };
    doc.descendants(&body)
        .into_iter()
        .filter(|e| doc.is_element(e))
        .filter(|e| assignment(doc, e) != Some(DeviceAssignment::Device2))
        .filter(|e| {
            doc.ancestors(e)
                .any(|a| assignment(doc, a) == Some(DeviceAssignment::Device2))
        })
        .collect()
}

/// Head children copied to the slave: everything annotated for the slave
/// except scripts, `<base>` and instrumentation.
fn slave_head_children(doc: &DomDocument) -> Vec<NodeId> {
    let Some(head) = doc.head() else {
        return Vec::new();
    };
    doc.children(&head)
        .iter()
        .filter(|c| match doc.tag(c) {
            Some("script" | "base") => false,
            Some(_) => {
                !is_instrumentation(doc, c)
                    && effective_assignment(doc, c).is_none_or(DeviceAssignment::on_slave)
            }
            None => true,
        })
        .cloned()
        .collect()
}

fn transformed_fragment(doc: &DomDocument, id: &NodeId, base: Option<&Url>) -> Option<Fragment> {
    let node = doc.node(id)?;
    Some(Fragment {
        id: Some(id.clone()),
        data: slave_data(&node.data, base),
        children: node
            .children()
            .iter()
            .filter(|c| doc.tag(c) != Some("script"))
            .filter_map(|c| transformed_fragment(doc, c, base))
            .collect(),
    })
}

fn config_json(session: &str, hub: &str, role: Role) -> String {
    let config = RuntimeConfig { session: session.into(), hub: hub.into(), role };
    serde_json::to_string(&config)
        .expect("config serializes")
        .replace("</", "<\\/")
}

fn both(fragment: Fragment) -> Fragment {
    fragment.with_attr(DEVICE_ATTR, DeviceAssignment::Both.token())
}

fn append_to(doc: &mut DomDocument, parent: &NodeId, fragment: Fragment) -> Result<(), DomError> {
    let prev = doc.children(parent).last().cloned();
    doc.mutate(Mutation::InsertNode { parent: parent.clone(), prev, node: fragment })?;
    Ok(())
}

/// Splits an annotated document into master and slave.
pub fn split(annotated: &DomDocument, config: &SplitConfig) -> Result<SplitResult, SplitError> {
    let violations = validate_annotation(annotated);
    if !violations.is_empty() {
        return Err(SplitError::InvalidAnnotation(violations));
    }
    let unreachable = unreachable_content(annotated);
    if !unreachable.is_empty() {
        return Err(SplitError::UnreachableContent(unreachable));
    }
    let head = annotated.head().ok_or(SplitError::MissingScaffold("head"))?;
    let projection = Projection::of(annotated).ok_or(SplitError::MissingScaffold("body"))?;
    let head_children = slave_head_children(annotated);

    let base = annotated.base_url();
    if base.is_none() {
        let mut offending: Vec<NodeId> = Vec::new();
        let mut candidates = projection.preorder();
        for h in &head_children {
            candidates.extend(annotated.descendants(h));
        }
        for n in candidates {
            if let Some(e) = annotated.element(&n) {
                if e.attributes.iter().any(|(k, v)| needs_base(k, v)) {
                    offending.push(n);
                }
            }
        }
        if !offending.is_empty() {
            return Err(SplitError::MissingBaseUrl(offending));
        }
    }

    let session = config.session_id.clone().unwrap_or_else(generate_session_id);

    let mut master = annotated.clone();
    append_to(
        &mut master,
        &head,
        both(Fragment::element("style").with_attr("id", HIDE_STYLE_ID))
            .with_child(Fragment::text(HIDE_RULE)),
    )?;
    append_to(
        &mut master,
        &head,
        both(
            Fragment::element("script")
                .with_attr("type", "application/json")
                .with_attr("id", CONFIG_ID),
        )
        .with_child(Fragment::text(config_json(&session, &config.hub_url, Role::Master))),
    )?;
    append_to(
        &mut master,
        &head,
        both(
            Fragment::element("script")
                .with_attr("id", RUNTIME_ID)
                .with_attr("src", &config.runtime_master_url)
                .with_attr("defer", ""),
        ),
    )?;
    master.stamp_identities();

    let mut slave_head = Vec::new();
    if let Some(base) = base {
        slave_head.push(Fragment::element("base").with_attr("href", base.as_str()));
    }
    slave_head.extend(head_children.iter().filter_map(|c| transformed_fragment(annotated, c, base)));
    slave_head.push(
        Fragment::element("script")
            .with_attr("type", "application/json")
            .with_attr("id", CONFIG_ID)
            .with_child(Fragment::text(config_json(&session, &config.hub_url, Role::Slave))),
    );
    slave_head.push(
        Fragment::element("script")
            .with_attr("id", RUNTIME_ID)
            .with_attr("src", &config.runtime_slave_url)
            .with_attr("defer", ""),
    );
    // Slave-only nodes get identities outside the numeric space the master
    // allocates from, so later master insertions can never collide with them.
    let mut local = 0;
    for f in &mut slave_head {
        fill_local_ids(f, &mut local);
    }
    let root_attrs = annotated
        .element(annotated.root())
        .map(|e| slave_attributes(&e.attributes, base))
        .unwrap_or_default();
    let head_attrs = annotated
        .element(&head)
        .map(|e| slave_attributes(&e.attributes, base))
        .unwrap_or_default();
    let slave_root = Fragment {
        id: Some(annotated.root().clone()),
        data: NodeData::element("html", root_attrs),
        children: vec![
            Fragment {
                id: Some(head.clone()),
                data: NodeData::element("head", head_attrs),
                children: slave_head,
            },
            projection.fragment(&projection.body, &|_| false),
        ],
    };
    let mut slave = DomDocument::from_fragment(slave_root, master.next_id())?;
    slave.set_base_url(base.cloned());
    slave.stamp_identities();

    let count = |value: DeviceAssignment| {
        annotated
            .elements()
            .iter()
            .filter(|e| assignment(annotated, e) == Some(value))
            .count()
    };
    let mirrored_count = annotated.elements().iter().filter(|e| slave.contains(e)).count();
    let manifest = Manifest {
        session: session.clone(),
        hidden_count: count(DeviceAssignment::Device2),
        mirrored_count,
        shared_count: count(DeviceAssignment::Both),
    };
    Ok(SplitResult { master, slave, session_id: session, manifest })
}

fn fill_local_ids(fragment: &mut Fragment, next: &mut usize) {
    if fragment.id.is_none() {
        *next += 1;
        fragment.id = Some(NodeId::new(format!("s{next}")));
    }
    for c in &mut fragment.children {
        fill_local_ids(c, next);
    }
}

/// Removes the elements injected by [`split`] from a master document.
pub fn strip_instrumentation(doc: &DomDocument) -> DomDocument {
    let mut out = doc.clone();
    let injected: Vec<NodeId> = out
        .elements()
        .into_iter()
        .filter(|e| is_instrumentation(&out, e))
        .collect();
    for e in injected {
        if out.contains(&e) {
            let _ = out.mutate(Mutation::RemoveNode { node: e });
        }
    }
    out
}

/// Reads the runtime configuration injected into a split document.
pub fn runtime_config(doc: &DomDocument) -> Option<RuntimeConfig> {
    let config = doc.find_by_html_id(CONFIG_ID)?;
    let text: String = doc
        .children(&config)
        .iter()
        .filter_map(|c| doc.node(c).and_then(|n| n.text()))
        .collect();
    serde_json::from_str(&text).ok()
}

#[derive(Debug, Clone)]
pub struct RuntimeSplit {
    /// The fresh split of the re-annotated document.
    pub result: SplitResult,
    /// `data-device` changes that turn the live master into the new annotation.
    pub annotation_updates: Vec<Mutation>,
    /// Changes that move an already connected slave to the new projection.
    pub transitions: Vec<ChangeRecord>,
}

/// Re-maps, re-annotates and re-splits a live master document. The live
/// master keeps its identities and instrumentation; only `data-device`
/// values change, and the slave is transitioned incrementally.
pub fn runtime_split_request(
    master: &DomDocument,
    query: &MappingQuery,
    geometry: &GeometryTable,
    options: &MappingOptions,
    config: &SplitConfig,
) -> Result<RuntimeSplit, SplitError> {
    let mut stripped = strip_instrumentation(master);
    for e in stripped.elements() {
        if let Some(el) = stripped.element_mut(&e) {
            el.attributes.remove(DEVICE_ATTR);
        }
    }
    let lists = evaluate_query(&stripped, query, geometry, options)?;
    let annotated = annotate(&stripped, &lists)?;
    let mut config = config.clone();
    if config.session_id.is_none() {
        config.session_id = runtime_config(master).map(|c| c.session);
    }
    let result = split(&annotated, &config)?;

    let annotation_updates: Vec<Mutation> = master
        .elements()
        .into_iter()
        .filter(|e| annotated.contains(e))
        .filter_map(|e| {
            let new = annotated.attr(&e, DEVICE_ATTR)?;
            (master.attr(&e, DEVICE_ATTR) != Some(new)).then(|| Mutation::SetAttribute {
                node: e.clone(),
                name: DEVICE_ATTR.into(),
                value: new.to_string(),
            })
        })
        .collect();

    let mut tracker = MirrorTracker::new(master).ok_or(SplitError::MissingScaffold("body"))?;
    let mut live = master.clone();
    let mut records = Vec::new();
    for m in &annotation_updates {
        if let Some(r) = live.mutate(m.clone())? {
            records.push(r);
        }
    }
    let transitions = tracker.process(&records)?;
    Ok(RuntimeSplit { result, annotation_updates, transitions })
}

/// Checks the coverage and identity invariants of a split against its
/// annotated input. Returns one message per problem.
pub fn check_split(annotated: &DomDocument, result: &SplitResult) -> Vec<String> {
    let mut problems = Vec::new();
    let master = &result.master;
    let slave = &result.slave;
    let scaffold: HashSet<NodeId> = [Some(annotated.root().clone()), annotated.head(), annotated.body()]
        .into_iter()
        .flatten()
        .collect();
    let in_script = |doc: &DomDocument, e: &NodeId| {
        std::iter::once(e)
            .chain(doc.ancestors(e))
            .any(|a| matches!(doc.tag(a), Some("script" | "base")))
    };
    let hidden_on_master = |e: &NodeId| {
        std::iter::once(e)
            .chain(master.ancestors(e))
            .any(|a| master.attr(a, DEVICE_ATTR) == Some(DeviceAssignment::Device2.token()))
    };

    let mut expected_slave_ids = HashSet::new();
    for e in annotated.elements() {
        let Some(value) = assignment(annotated, &e) else {
            problems.push(format!("{e}: no annotation"));
            continue;
        };
        if !master.contains(&e) {
            problems.push(format!("{e}: missing from master"));
            continue;
        }
        if master.tag(&e) != annotated.tag(&e) {
            problems.push(format!("{e}: changed on master"));
        }
        if master.parent(&e) != annotated.parent(&e) {
            problems.push(format!("{e}: moved on master"));
        }
        let visible = !hidden_on_master(&e);
        if visible != value.visible_on_master() {
            problems.push(format!("{e} ({value}): visible on master = {visible}"));
        }
        if scaffold.contains(&e) {
            continue;
        }
        if in_script(annotated, &e) {
            if slave.contains(&e) {
                problems.push(format!("{e}: script content reached the slave"));
            }
            continue;
        }
        if slave.contains(&e) != value.on_slave() {
            problems.push(format!("{e} ({value}): present on slave = {}", slave.contains(&e)));
        }
        if value.on_slave() {
            expected_slave_ids.insert(e.clone());
            if slave.tag(&e) != annotated.tag(&e) {
                problems.push(format!("{e}: tag differs on slave"));
            }
            // Mirrored text must be identical.
            for c in annotated.children(&e) {
                if let Some(text) = annotated.node(c).and_then(|n| n.text()) {
                    if slave.node(c).and_then(|n| n.text()) != Some(text) {
                        problems.push(format!("{c}: text differs on slave"));
                    }
                }
            }
            // Mirrored element children keep their relative order.
            let expected: Vec<&NodeId> = annotated
                .element_children(&e)
                .filter(|c| slave.contains(c) && slave.parent(c) == Some(&e))
                .collect();
            let actual: Vec<&NodeId> = slave.element_children(&e).collect();
            if expected != actual {
                problems.push(format!("{e}: children differ on slave"));
            }
        }
    }
    for e in slave.elements() {
        if scaffold.contains(&e) || !annotated.contains(&e) {
            if !scaffold.contains(&e) && !is_instrumentation(slave, &e) && slave.tag(&e) != Some("base") {
                problems.push(format!("{e}: unexpected element on slave"));
            }
            continue;
        }
        if !expected_slave_ids.contains(&e) {
            problems.push(format!("{e}: on slave but not slave-bound"));
        }
        if slave.tag(&e) == Some("script") {
            problems.push(format!("{e}: application script on slave"));
        }
        if let Some(el) = slave.element(&e) {
            if el.attributes.iter().any(|(n, _)| n.starts_with("on")) {
                problems.push(format!("{e}: inline handler on slave"));
            }
        }
    }
    let hidden = annotated
        .elements()
        .iter()
        .filter(|e| assignment(annotated, e) == Some(DeviceAssignment::Device2))
        .count();
    if result.manifest.hidden_count != hidden {
        problems.push(format!("manifest hidden_count {} != {hidden}", result.manifest.hidden_count));
    }
    let mirrored = annotated.elements().iter().filter(|e| slave.contains(e)).count();
    if result.manifest.mirrored_count != mirrored {
        problems.push(format!("manifest mirrored_count {} != {mirrored}", result.manifest.mirrored_count));
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::{parse_html, serialize_html};
    use crate::mapping::{map_semantic, DeviceLists, ElementClass, SemanticCriterion};

    fn annotated(html: &str, base: Option<&str>) -> DomDocument {
        let d = parse_html(html.as_bytes(), base.map(|b| Url::parse(b).unwrap())).unwrap();
        let lists = map_semantic(&d, &SemanticCriterion::new([ElementClass::Multimedia]));
        annotate(&d, &lists).unwrap()
    }

    fn fixed() -> SplitConfig {
        SplitConfig { session_id: Some("s1".into()), ..SplitConfig::default() }
    }

    #[test]
    fn video_goes_to_slave_and_is_hidden_on_master() {
        let a = annotated(r#"<p id=p>t</p><video id=v src="http://h/c.mp4"></video><script>go()</script>"#, None);
        let r = split(&a, &fixed()).unwrap();
        let v = a.find_by_html_id("v").unwrap();
        let p = a.find_by_html_id("p").unwrap();
        assert_eq!(r.master.attr(&v, DEVICE_ATTR), Some("device2"));
        assert!(serialize_html(&r.master, false).contains(HIDE_RULE));
        let body = r.slave.body().unwrap();
        assert_eq!(r.slave.children(&body), std::slice::from_ref(&v));
        assert!(!r.slave.contains(&p));
        assert!(r.slave.elements().iter().all(|e| r.slave.tag(e) != Some("script")
            || matches!(r.slave.attr(e, "id"), Some(CONFIG_ID | RUNTIME_ID))));
        assert!(check_split(&a, &r).is_empty(), "{:?}", check_split(&a, &r));
        assert_eq!(r.manifest.hidden_count, 1);
    }

    #[test]
    fn all_both_mirrors_whole_body() {
        let d = parse_html(b"<p>a</p><div><span>b</span></div>", None).unwrap();
        let a = annotate(&d, &DeviceLists::default()).unwrap();
        let r = split(&a, &fixed()).unwrap();
        let body = a.body().unwrap();
        assert!(!r.slave.canonical_subtree(&body).contains(DEVICE_ATTR));
        for e in a.descendants(&body) {
            assert!(r.slave.contains(&e));
        }
        assert!(r.master.elements().iter().all(|e| r.master.attr(e, DEVICE_ATTR) != Some("device2")));
        assert!(check_split(&a, &r).is_empty());
    }

    #[test]
    fn urls_absolutized_on_slave() {
        let a = annotated(r#"<video id=v src="clip.mp4" poster="p.png"></video>"#, Some("http://h/app/"));
        let r = split(&a, &fixed()).unwrap();
        let v = a.find_by_html_id("v").unwrap();
        assert_eq!(r.slave.attr(&v, "src"), Some("http://h/app/clip.mp4"));
        assert_eq!(r.slave.attr(&v, "poster"), Some("http://h/app/p.png"));
        assert_eq!(r.master.attr(&v, "src"), Some("clip.mp4"));
    }

    #[test]
    fn srcset_candidates_absolutized() {
        let base = Url::parse("http://h/a/").unwrap();
        assert_eq!(absolutize("srcset", "x.png 1x, y.png 2x", Some(&base)), "http://h/a/x.png 1x, http://h/a/y.png 2x");
        assert!(needs_base("srcset", "http://e/x.png 1x, y.png 2x"));
        assert!(!needs_base("href", "#top"));
        assert!(!needs_base("class", "a.png"));
    }

    #[test]
    fn relative_url_without_base_is_rejected() {
        let a = annotated(r#"<video id=v src="clip.mp4"></video><img src="rel.png">"#, None);
        match split(&a, &fixed()) {
            Err(SplitError::MissingBaseUrl(nodes)) => assert_eq!(nodes, vec![a.find_by_html_id("v").unwrap()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn handlers_and_scripts_stripped_from_slave() {
        let d = parse_html(br#"<button id=b onclick="f()">x<script>s()</script></button>"#, None).unwrap();
        let lists = map_semantic(&d, &SemanticCriterion::new([ElementClass::Interactive]));
        let a = annotate(&d, &lists).unwrap();
        let r = split(&a, &fixed()).unwrap();
        let b = a.find_by_html_id("b").unwrap();
        assert_eq!(r.slave.attr(&b, "onclick"), None);
        assert_eq!(r.master.attr(&b, "onclick"), Some("f()"));
        assert_eq!(r.slave.children(&b).len(), 1);
        assert!(check_split(&a, &r).is_empty());
    }

    #[test]
    fn head_resources_copied_and_config_injected() {
        let a = annotated(
            r#"<html><head><title>T</title><link rel=stylesheet href="s.css"><script src="app.js"></script></head><body><video></video></body></html>"#,
            Some("http://h/"),
        );
        let r = split(&a, &fixed()).unwrap();
        let html = serialize_html(&r.slave, false);
        assert!(html.contains("<title>T</title>"));
        assert!(html.contains(r#"href="http://h/s.css""#));
        assert!(html.contains(r#"<base href="http://h/">"#));
        assert!(!html.contains("app.js"));
        assert_eq!(
            runtime_config(&r.slave),
            Some(RuntimeConfig { session: "s1".into(), hub: fixed().hub_url, role: Role::Slave })
        );
        assert_eq!(runtime_config(&r.master).unwrap().role, Role::Master);
    }

    #[test]
    fn config_escapes_script_end() {
        assert!(!config_json("</script>", "h", Role::Master).contains("</"));
    }

    #[test]
    fn device1_under_device2_is_rejected() {
        let d = parse_html(b"<div id=d><p id=p>x</p></div>", None).unwrap();
        let lists = DeviceLists {
            primary: vec![d.find_by_html_id("p").unwrap()],
            secondary: vec![d.find_by_html_id("d").unwrap()],
        };
        let a = annotate(&d, &lists).unwrap();
        assert!(matches!(split(&a, &fixed()), Err(SplitError::UnreachableContent(_))));
    }

    #[test]
    fn split_is_deterministic() {
        let a = annotated("<p>a</p><video></video>", None);
        let x = split(&a, &fixed()).unwrap();
        let y = split(&a, &fixed()).unwrap();
        assert_eq!(serialize_html(&x.master, true), serialize_html(&y.master, true));
        assert_eq!(serialize_html(&x.slave, true), serialize_html(&y.slave, true));
    }

    #[test]
    fn strip_removes_instrumentation() {
        let a = annotated("<p>a</p><video></video>", None);
        let r = split(&a, &fixed()).unwrap();
        assert_eq!(strip_instrumentation(&r.master).canonical(), a.canonical());
    }

    #[test]
    fn reissued_query_is_a_fixed_point() {
        let a = annotated("<p>a</p><video></video><audio></audio>", None);
        let r = split(&a, &fixed()).unwrap();
        let q = MappingQuery::semantic([ElementClass::Multimedia]);
        let rs = runtime_split_request(&r.master, &q, &GeometryTable::new(), &MappingOptions::default(), &SplitConfig::default()).unwrap();
        assert!(rs.annotation_updates.is_empty());
        assert!(rs.transitions.is_empty());
        assert_eq!(rs.result.session_id, "s1");
    }
}
