//! Annotation: totalizes device lists into a `data-device` value on every
//! element.
//!
//! Listed elements keep their list's device. Unlisted leaves follow their
//! listed siblings, unlisted parents follow their children, and whatever is
//! left inherits from its parent.

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::dom::{DomDocument, NodeId, IDENTITY_ATTR};
use crate::mapping::DeviceLists;

pub const DEVICE_ATTR: &str = "data-device";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceAssignment {
    Device1,
    Device2,
    Both,
}

impl DeviceAssignment {
    pub fn token(self) -> &'static str {
        match self {
            DeviceAssignment::Device1 => "device1",
            DeviceAssignment::Device2 => "device2",
            DeviceAssignment::Both => "dev1&dev2",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "device1" => Some(DeviceAssignment::Device1),
            "device2" => Some(DeviceAssignment::Device2),
            "dev1&dev2" => Some(DeviceAssignment::Both),
            _ => None,
        }
    }

    /// Whether content with this assignment is present on the secondary device.
    pub fn on_slave(self) -> bool {
        matches!(self, DeviceAssignment::Device2 | DeviceAssignment::Both)
    }

    /// Whether content with this assignment is visible on the primary device.
    pub fn visible_on_master(self) -> bool {
        matches!(self, DeviceAssignment::Device1 | DeviceAssignment::Both)
    }

    /// The common value, or `Both` when they differ.
    fn merge(self, other: Self) -> Self {
        if self == other {
            self
        } else {
            DeviceAssignment::Both
        }
    }
}

impl fmt::Display for DeviceAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// The element's own `data-device` value, if valid.
pub fn assignment(doc: &DomDocument, id: &NodeId) -> Option<DeviceAssignment> {
    doc.attr(id, DEVICE_ATTR).and_then(DeviceAssignment::from_token)
}

/// The nearest annotation on `id` or its ancestors. Text nodes follow their parent.
pub fn effective_assignment(doc: &DomDocument, id: &NodeId) -> Option<DeviceAssignment> {
    std::iter::once(id)
        .chain(doc.ancestors(id))
        .find_map(|n| assignment(doc, n))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotationError {
    #[error("device lists reference unknown node {0}")]
    UnknownNode(NodeId),
    #[error("device lists reference non-element node {0}")]
    NotAnElement(NodeId),
    #[error("node {0} is listed for both devices")]
    NotDisjoint(NodeId),
}

/// Annotates a copy of `doc`. Existing `data-device` values are ignored, so
/// annotating twice with the same lists gives the same document.
pub fn annotate(doc: &DomDocument, lists: &DeviceLists) -> Result<DomDocument, AnnotationError> {
    let mut listed: HashMap<NodeId, DeviceAssignment> = HashMap::new();
    for (list, value) in [
        (&lists.primary, DeviceAssignment::Device1),
        (&lists.secondary, DeviceAssignment::Device2),
    ] {
        for id in list {
            if !doc.contains(id) {
                return Err(AnnotationError::UnknownNode(id.clone()));
            }
            if !doc.is_element(id) {
                return Err(AnnotationError::NotAnElement(id.clone()));
            }
            if listed.insert(id.clone(), value).is_some_and(|v| v != value) {
                return Err(AnnotationError::NotDisjoint(id.clone()));
            }
        }
    }

    let elements = doc.elements();
    let mut values = listed.clone();
    if let Some(head) = doc.head() {
        values.entry(head).or_insert(DeviceAssignment::Both);
    }

    // Leaves follow the listed element siblings.
    let mut from_siblings = Vec::new();
    for e in &elements {
        if values.contains_key(e) || doc.element_children(e).next().is_some() {
            continue;
        }
        let Some(parent) = doc.parent(e) else {
            continue;
        };
        let shared = doc
            .element_children(parent)
            .filter(|s| *s != e)
            .filter_map(|s| listed.get(s).copied())
            .reduce(DeviceAssignment::merge);
        if let Some(v) = shared {
            from_siblings.push((e.clone(), v));
        }
    }
    values.extend(from_siblings);

    // Parents follow their annotated children, deepest first.
    for e in elements.iter().rev() {
        if values.contains_key(e) {
            continue;
        }
        let shared = doc
            .element_children(e)
            .filter_map(|c| values.get(c).copied())
            .reduce(DeviceAssignment::merge);
        if let Some(v) = shared {
            values.insert(e.clone(), v);
        }
    }

    // Whatever is left inherits from its parent.
    for e in &elements {
        if values.contains_key(e) {
            continue;
        }
        let inherited = doc
            .parent(e)
            .and_then(|p| values.get(p).copied())
            .unwrap_or(DeviceAssignment::Both);
        values.insert(e.clone(), inherited);
    }

    let mut out = doc.clone();
    for e in &elements {
        let el = out.element_mut(e).expect("element");
        el.attributes.set(DEVICE_ATTR, values[e].token());
    }
    out.stamp_identities();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    MissingDevice,
    UnknownToken(String),
    MissingIdentity,
    IdentityMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: NodeId,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::MissingDevice => write!(f, "node {}: missing {DEVICE_ATTR}", self.node),
            ViolationKind::UnknownToken(t) => {
                write!(f, "node {}: unknown {DEVICE_ATTR} value {t:?}", self.node)
            }
            ViolationKind::MissingIdentity => write!(f, "node {}: missing {IDENTITY_ATTR}", self.node),
            ViolationKind::IdentityMismatch(v) => {
                write!(f, "node {}: {IDENTITY_ATTR} is {v:?}", self.node)
            }
        }
    }
}

/// Reports elements without a valid device value or identity attribute.
pub fn validate_annotation(doc: &DomDocument) -> Vec<Violation> {
    let mut violations = Vec::new();
    for e in doc.elements() {
        match doc.attr(&e, DEVICE_ATTR) {
            None => violations.push(Violation { node: e.clone(), kind: ViolationKind::MissingDevice }),
            Some(t) if DeviceAssignment::from_token(t).is_none() => violations.push(Violation {
                node: e.clone(),
                kind: ViolationKind::UnknownToken(t.to_string()),
            }),
            Some(_) => {}
        }
        match doc.attr(&e, IDENTITY_ATTR) {
            None => violations.push(Violation { node: e.clone(), kind: ViolationKind::MissingIdentity }),
            Some(v) if v != e.as_str() => violations.push(Violation {
                node: e.clone(),
                kind: ViolationKind::IdentityMismatch(v.to_string()),
            }),
            Some(_) => {}
        }
    }
    violations
}

/// Checks the parent rule on an annotated document: an element whose element
/// children all share one value carries that value, and one whose children
/// disagree is `Both`. Listed elements and the head are exempt. Returns the
/// offending elements.
pub fn parent_consistency_violations(doc: &DomDocument, lists: &DeviceLists) -> Vec<NodeId> {
    let exempt: HashSet<&NodeId> = lists.primary.iter().chain(&lists.secondary).collect();
    let head = doc.head();
    doc.elements()
        .into_iter()
        .filter(|e| !exempt.contains(e) && head.as_ref() != Some(e))
        .filter(|e| {
            let expected = doc
                .element_children(e)
                .map(|c| assignment(doc, c))
                .reduce(|a, b| match (a, b) {
                    (Some(a), Some(b)) => Some(a.merge(b)),
                    _ => None,
                });
            match expected {
                None => false,
                Some(expected) => expected != assignment(doc, e),
            }
        })
        .collect()
}
