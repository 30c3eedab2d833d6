//! Helpers shared by the integration tests: fixture loading and oracles that
//! recompute expected results without going through the library's own
//! projection code.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use url::Url;
use vsplit_core::annotation::{annotate, validate_annotation};
use vsplit_core::dom::{parse_html, DomDocument, NodeData, NodeId};
use vsplit_core::mapping::{evaluate_query, DeviceLists, GeometryTable, MappingOptions, MappingQuery};
use vsplit_core::splitter::{split, SplitConfig, SplitResult};

/// Written relative to the core crate so other crates' tests can include
/// this module too.
pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(fixture_dir().join(name)).unwrap_or_else(|e| panic!("fixture {name}: {e}"))
}

pub fn load(name: &str, base: Option<&str>) -> DomDocument {
    parse_html(fixture_text(name).as_bytes(), base.map(|b| Url::parse(b).unwrap())).unwrap()
}

/// The `id` attributes of the given nodes.
pub fn html_ids<'a>(doc: &DomDocument, nodes: impl IntoIterator<Item = &'a NodeId>) -> BTreeSet<String> {
    nodes.into_iter().filter_map(|n| doc.attr(n, "id").map(str::to_string)).collect()
}

pub fn set(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

fn in_script(doc: &DomDocument, n: &NodeId) -> bool {
    std::iter::once(n).chain(doc.ancestors(n)).any(|a| doc.tag(a) == Some("script"))
}

/// Body elements outside scripts, in document order.
pub fn body_elements(doc: &DomDocument) -> Vec<NodeId> {
    let body = doc.body().unwrap();
    doc.descendants(&body)
        .into_iter()
        .skip(1)
        .filter(|n| doc.is_element(n) && !in_script(doc, n))
        .collect()
}

/// The `data-device` value in force at a node: its own, or the nearest
/// annotated ancestor's.
pub fn effective_device<'a>(doc: &'a DomDocument, n: &NodeId) -> Option<&'a str> {
    std::iter::once(n).chain(doc.ancestors(n)).find_map(|a| doc.attr(a, "data-device"))
}

/// Elements whose own `data-device` is `token`, as `id` attributes.
pub fn annotated_ids(doc: &DomDocument, token: &str) -> BTreeSet<String> {
    let els: Vec<NodeId> = body_elements(doc).into_iter().filter(|e| doc.attr(e, "data-device") == Some(token)).collect();
    html_ids(doc, &els)
}

fn mirrored(master: &DomDocument, n: &NodeId) -> bool {
    !in_script(master, n) && matches!(effective_device(master, n), Some("device2" | "dev1&dev2"))
}

fn shown_attribute(name: &str, value: &str, base: Option<&Url>) -> Option<String> {
    if name.starts_with("on") && name.len() > 2 || name == "data-device" || name.starts_with("data-vs-") {
        return None;
    }
    let relative = !value.trim().is_empty()
        && !value.trim().starts_with('#')
        && matches!(Url::parse(value.trim()), Err(url::ParseError::RelativeUrlWithoutBase));
    if ["src", "href", "poster", "data"].contains(&name) && relative {
        if let Some(base) = base {
            return Some(base.join(value.trim()).unwrap().to_string());
        }
    }
    Some(value.to_string())
}

fn render_node(doc: &DomDocument, n: &NodeId, base: Option<&Url>, children: &dyn Fn(&NodeId) -> Vec<NodeId>, out: &mut String) {
    match &doc.node(n).unwrap().data {
        NodeData::Text(t) => out.push_str(&format!("{t:?}")),
        NodeData::Comment(c) => out.push_str(&format!("<!--{c:?}-->")),
        NodeData::Element(e) => {
            let mut attrs: Vec<(String, String)> = e
                .attributes
                .iter()
                .filter_map(|(k, v)| shown_attribute(k, v, base).map(|v| (k.to_string(), v)))
                .collect();
            attrs.sort();
            out.push_str(&format!("<{} {:?}>", e.tag, attrs));
            for c in children(n) {
                render_node(doc, &c, base, children, out);
            }
            out.push_str(&format!("</{}>", e.tag));
        }
    }
}

/// What the slave body should contain given a master document: the mirrored
/// nodes, each under its parent when that parent is mirrored and directly
/// under the body otherwise, in document order.
pub fn expected_slave_body(master: &DomDocument) -> String {
    let body = master.body().unwrap();
    let base = master.base_url().cloned();
    let order: Vec<NodeId> = master.descendants(&body).into_iter().skip(1).collect();
    let slave_parent = |n: &NodeId| -> NodeId {
        let p = master.parent(n).unwrap().clone();
        if p == body || mirrored(master, &p) {
            p
        } else {
            body.clone()
        }
    };
    let children = |p: &NodeId| -> Vec<NodeId> {
        order.iter().filter(|n| mirrored(master, n) && slave_parent(n) == *p).cloned().collect()
    };
    let mut out = String::new();
    for c in children(&body) {
        render_node(master, &c, base.as_ref(), &children, &mut out);
    }
    out
}

/// The slave body in the same rendering as [`expected_slave_body`].
pub fn slave_body(slave: &DomDocument) -> String {
    let body = slave.body().unwrap();
    let children = |p: &NodeId| slave.children(p).to_vec();
    let mut out = String::new();
    for c in slave.children(&body) {
        render_node(slave, c, None, &children, &mut out);
    }
    out
}

// ---------------------------------------------------------------------------
// The two case-study fixtures and their hand-derived expectations

pub const YOUTUBE_BASE: &str = "https://videotube.example/watch?v=bbb";
pub const VIDEO_BASE: &str = "https://popcorn.example/semantic-video/";

/// Buttons, anchors, the search form and the guide container.
pub const YOUTUBE_DEVICE2: &[&str] = &[
    "masthead", "logo", "logo-img", "search-form", "search-label", "search-input", "search-button",
    "guide", "guide-1", "guide-2", "guide-3", "thumb-1", "thumb-2", "thumb-3", "guide-1-title",
    "guide-2-title", "guide-3-title", "actions", "like", "dislike", "share", "subscribe",
];
/// The video and the comments.
pub const YOUTUBE_DEVICE1: &[&str] = &[
    "player", "movie", "video-title", "description", "comments", "comments-title", "comment-1",
    "comment-1-author", "comment-1-text", "comment-2", "comment-2-author", "comment-2-text",
    "comment-3", "comment-3-author", "comment-3-text",
];
pub const YOUTUBE_BOTH: &[&str] = &["page", "watch"];

/// The video and the photo strip inside the selected rectangle.
pub const VIDEO_DEVICE2: &[&str] = &["media", "main-video", "flickr", "photo-1", "photo-2", "photo-3"];
/// The additional information around it.
pub const VIDEO_DEVICE1: &[&str] = &[
    "masthead", "title", "info", "info-title", "caption", "map", "map-img", "wiki", "credits", "credit-text",
];
pub const VIDEO_BOTH: &[&str] = &["stage"];

/// Map, annotate and split with a fixed session.
pub fn pipeline(doc: &DomDocument, query: &str, geometry: Option<&str>) -> (DomDocument, SplitResult) {
    let query: MappingQuery = serde_json::from_str(query).unwrap();
    let geometry = match geometry {
        Some(g) => serde_json::from_str::<GeometryTable>(g).unwrap().resolve_html_ids(doc).unwrap(),
        None => GeometryTable::new(),
    };
    let lists = evaluate_query(doc, &query, &geometry, &MappingOptions::default()).unwrap();
    let annotated = annotate(doc, &lists).unwrap();
    let config = SplitConfig { session_id: Some("fixture".into()), ..SplitConfig::default() };
    let result = split(&annotated, &config).unwrap();
    (annotated, result)
}

pub fn youtube() -> (DomDocument, SplitResult) {
    let doc = load("youtube-like.html", Some(YOUTUBE_BASE));
    pipeline(&doc, &fixture_text("interactive.query.json"), None)
}

pub fn semantic_video() -> (DomDocument, SplitResult) {
    let doc = load("semantic-video.html", Some(VIDEO_BASE));
    pipeline(&doc, &fixture_text("semantic-video.query.json"), Some(&fixture_text("semantic-video.geometry.json")))
}

/// Compares annotation and slave content with the expected id sets.
pub fn check_expected_ids(
    annotated: &DomDocument,
    result: &SplitResult,
    device2: &[&str],
    device1: &[&str],
    both: &[&str],
) -> Result<(), String> {
    for (token, want) in [("device2", device2), ("device1", device1), ("dev1&dev2", both)] {
        let got = annotated_ids(annotated, token);
        if got != set(want) {
            return Err(format!("{token}: got {got:?}, want {want:?}"));
        }
    }
    let mut on_slave = set(device2);
    on_slave.extend(set(both));
    let got = html_ids(&result.slave, &body_elements(&result.slave));
    if got != on_slave {
        return Err(format!("slave: got {got:?}, want {on_slave:?}"));
    }
    Ok(())
}

/// Visible master content plus slave content is the original content, and
/// hidden master content is exactly what only the slave shows.
pub fn check_coverage(annotated: &DomDocument, result: &SplitResult) -> Result<(), String> {
    let original: BTreeSet<_> = body_elements(annotated).into_iter().collect();
    let master = &result.master;
    let (hidden, visible): (BTreeSet<_>, BTreeSet<_>) =
        body_elements(master).into_iter().partition(|e| effective_device(master, e) == Some("device2"));
    let slave: BTreeSet<_> = body_elements(&result.slave).into_iter().collect();
    let union: BTreeSet<_> = visible.union(&slave).cloned().collect();
    if union != original {
        return Err(format!("visible master ∪ slave differs from the original by {:?}", union.symmetric_difference(&original).collect::<Vec<_>>()));
    }
    let slave_only: BTreeSet<_> = slave.difference(&visible).cloned().collect();
    if hidden != slave_only {
        return Err(format!("hidden master {hidden:?} differs from slave-only {slave_only:?}"));
    }
    for e in &slave {
        if result.slave.tag(e) != annotated.tag(e) {
            return Err(format!("{e} changed tag on the slave"));
        }
    }
    if slave_body(&result.slave) != expected_slave_body(master) {
        return Err("slave content is not the projection of the master".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Annotation properties

const TOKENS: [&str; 3] = ["device1", "device2", "dev1&dev2"];

/// Random disjoint device lists over a document's body elements.
pub fn random_lists(doc: &DomDocument, rng: &mut ChaCha8Rng) -> DeviceLists {
    let body = doc.body().unwrap();
    let mut lists = DeviceLists::default();
    let p_listed = rng.gen_range(0.0..0.6);
    for e in doc.descendants(&body).into_iter().skip(1).filter(|e| doc.is_element(e)) {
        if rng.gen_bool(p_listed) {
            if rng.gen_bool(0.5) {
                lists.primary.push(e);
            } else {
                lists.secondary.push(e);
            }
        }
    }
    lists
}

/// Checks totality, input respect, parent consistency and idempotence,
/// returning the violations found.
pub fn annotation_violations(doc: &DomDocument, lists: &DeviceLists) -> Vec<String> {
    let mut out = Vec::new();
    let annotated = annotate(doc, lists).unwrap();
    let mut forced: HashMap<NodeId, &str> = HashMap::new();
    for id in &lists.primary {
        forced.insert(id.clone(), "device1");
    }
    for id in &lists.secondary {
        forced.insert(id.clone(), "device2");
    }

    // Totality: every element carries exactly one known token, and an identity.
    for e in annotated.elements() {
        match annotated.attr(&e, "data-device") {
            Some(t) if TOKENS.contains(&t) => {}
            other => out.push(format!("totality: {e} has {other:?}")),
        }
        if annotated.attr(&e, "data-vs-id") != Some(e.as_str()) {
            out.push(format!("totality: {e} lacks its identity"));
        }
    }
    if !validate_annotation(&annotated).is_empty() {
        out.push("validator reports violations".into());
    }

    // Input respect.
    for (id, token) in &forced {
        if annotated.attr(id, "data-device") != Some(*token) {
            out.push(format!("input: {id} is {:?}, listed as {token}", annotated.attr(id, "data-device")));
        }
    }

    // Parent consistency, with listed elements and the forced head exempt.
    let head = annotated.head();
    for e in annotated.elements() {
        if forced.contains_key(&e) || Some(&e) == head.as_ref() {
            continue;
        }
        let children: Vec<&str> = annotated
            .element_children(&e)
            .filter_map(|c| annotated.attr(c, "data-device"))
            .collect();
        let Some(first) = children.first() else { continue };
        let want = if children.iter().all(|c| c == first) { *first } else { "dev1&dev2" };
        let got = annotated.attr(&e, "data-device").unwrap_or("");
        if got != want {
            out.push(format!("parent: {e} is {got}, children imply {want}"));
        }
    }

    // Idempotence.
    let again = annotate(&annotated, lists).unwrap();
    if !again.structurally_eq(&annotated) {
        out.push("idempotence: second annotation differs".into());
    }
    out
}
