//! HTML document model with stable node identity.
//!
//! Every node carries a [`NodeId`] that survives serialization: elements persist
//! it in the `data-vs-id` attribute, text and comment nodes through the
//! `data-vs-text` list on their parent element. Both devices of a split address
//! the same logical node by the same token.

mod parse;
mod serialize;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use url::Url;

pub use parse::{parse_fragment, parse_html, parse_html_from, ParseError};
pub use serialize::{serialize_html, serialize_node};

/// Attribute persisting an element's identity.
pub const IDENTITY_ATTR: &str = "data-vs-id";
/// Attribute listing the identities of an element's text and comment children.
pub const TEXT_IDENTITY_ATTR: &str = "data-vs-text";

/// Opaque node identity token, unique within a session.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(Arc<str>);

impl NodeId {
    pub fn new(token: impl AsRef<str>) -> Self {
        NodeId(Arc::from(token.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Tokens are restricted so they can be listed inside `data-vs-text`.
    pub fn is_valid_token(token: &str) -> bool {
        !token.is_empty()
            && token.len() <= 128
            && token
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
    }

    fn numeric(&self) -> Option<u64> {
        self.0.parse().ok()
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId::new(s)
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s.is_empty() {
            return Err(serde::de::Error::custom("node id must not be empty"));
        }
        Ok(NodeId::new(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Element,
    Text,
    Comment,
}

/// Ordered attribute list. Names are unique and lowercase; equality ignores order.
#[derive(Debug, Clone, Default, Eq)]
pub struct Attributes(Vec<(String, String)>);

impl Attributes {
    pub fn new() -> Self {
        Attributes(Vec::new())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// Sets `name`, keeping its position if present. Returns the previous value.
    pub fn set(&mut self, name: &str, value: impl Into<String>) -> Option<String> {
        let name = name.to_ascii_lowercase();
        let value = value.into();
        match self.0.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => Some(std::mem::replace(v, value)),
            None => {
                self.0.push((name, value));
                None
            }
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<String> {
        let idx = self.0.iter().position(|(n, _)| n.eq_ignore_ascii_case(name))?;
        Some(self.0.remove(idx).1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str, &str) -> bool) {
        self.0.retain(|(n, v)| keep(n, v));
    }

    /// Attributes sorted by name, as used for order-insensitive comparison.
    pub fn sorted(&self) -> Vec<(&str, &str)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort();
        v
    }
}

impl PartialEq for Attributes {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.sorted() == other.sorted()
    }
}

impl<N: Into<String>, V: Into<String>> FromIterator<(N, V)> for Attributes {
    fn from_iter<I: IntoIterator<Item = (N, V)>>(iter: I) -> Self {
        let mut attrs = Attributes::new();
        for (n, v) in iter {
            let n = n.into();
            if !attrs.contains(&n) {
                attrs.set(&n, v);
            }
        }
        attrs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub tag: String,
    pub attributes: Attributes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeData {
    Element(Element),
    Text(String),
    Comment(String),
}

impl NodeData {
    pub fn element(tag: &str, attributes: Attributes) -> Self {
        NodeData::Element(Element {
            tag: tag.to_string(),
            attributes,
        })
    }

    pub fn kind(&self) -> NodeKind {
        match self {
            NodeData::Element(_) => NodeKind::Element,
            NodeData::Text(_) => NodeKind::Text,
            NodeData::Comment(_) => NodeKind::Comment,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DomNode {
    id: NodeId,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    pub data: NodeData,
}

impl DomNode {
    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn parent(&self) -> Option<&NodeId> {
        self.parent.as_ref()
    }

    pub fn children(&self) -> &[NodeId] {
        &self.children
    }

    pub fn kind(&self) -> NodeKind {
        self.data.kind()
    }

    pub fn as_element(&self) -> Option<&Element> {
        match &self.data {
            NodeData::Element(e) => Some(e),
            _ => None,
        }
    }

    pub fn tag(&self) -> Option<&str> {
        self.as_element().map(|e| e.tag.as_str())
    }

    pub fn text(&self) -> Option<&str> {
        match &self.data {
            NodeData::Text(t) | NodeData::Comment(t) => Some(t),
            NodeData::Element(_) => None,
        }
    }
}

/// A detached node tree, used for insertion and in `childAdded` records.
///
/// Nodes with `id: None` receive fresh identities when inserted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub id: Option<NodeId>,
    pub data: NodeData,
    pub children: Vec<Fragment>,
}

impl Fragment {
    pub fn element(tag: &str) -> Self {
        Fragment {
            id: None,
            data: NodeData::element(&tag.to_ascii_lowercase(), Attributes::new()),
            children: Vec::new(),
        }
    }

    pub fn text(text: impl Into<String>) -> Self {
        Fragment {
            id: None,
            data: NodeData::Text(text.into()),
            children: Vec::new(),
        }
    }

    pub fn comment(text: impl Into<String>) -> Self {
        Fragment {
            id: None,
            data: NodeData::Comment(text.into()),
            children: Vec::new(),
        }
    }

    pub fn with_id(mut self, id: impl Into<NodeId>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn with_attr(mut self, name: &str, value: &str) -> Self {
        if let NodeData::Element(e) = &mut self.data {
            e.attributes.set(name, value);
        }
        self
    }

    pub fn with_child(mut self, child: Fragment) -> Self {
        self.children.push(child);
        self
    }

    /// Number of nodes in the fragment, including the root.
    pub fn size(&self) -> usize {
        1 + self.children.iter().map(Fragment::size).sum::<usize>()
    }

    fn ids<'a>(&'a self, out: &mut Vec<&'a NodeId>) {
        if let Some(id) = &self.id {
            out.push(id);
        }
        for c in &self.children {
            c.ids(out);
        }
    }
}

/// A requested change to a document.
#[derive(Debug, Clone, PartialEq)]
pub enum Mutation {
    InsertNode {
        parent: NodeId,
        prev: Option<NodeId>,
        node: Fragment,
    },
    RemoveNode {
        node: NodeId,
    },
    SetAttribute {
        node: NodeId,
        name: String,
        value: String,
    },
    RemoveAttribute {
        node: NodeId,
        name: String,
    },
    SetText {
        node: NodeId,
        text: String,
    },
    MoveNode {
        node: NodeId,
        parent: NodeId,
        prev: Option<NodeId>,
    },
}

/// Canonical description of one applied change.
#[derive(Debug, Clone, PartialEq)]
pub enum MutationRecord {
    ChildAdded {
        node: NodeId,
        parent: NodeId,
        prev: Option<NodeId>,
        /// The inserted subtree with every identity filled in.
        subtree: Fragment,
    },
    ChildRemoved {
        node: NodeId,
        parent: NodeId,
    },
    AttributeChanged {
        node: NodeId,
        name: String,
        value: String,
    },
    AttributeRemoved {
        node: NodeId,
        name: String,
    },
    TextChanged {
        node: NodeId,
        text: String,
    },
    Moved {
        node: NodeId,
        parent: NodeId,
        prev: Option<NodeId>,
    },
}

impl MutationRecord {
    pub fn node(&self) -> &NodeId {
        match self {
            MutationRecord::ChildAdded { node, .. }
            | MutationRecord::ChildRemoved { node, .. }
            | MutationRecord::AttributeChanged { node, .. }
            | MutationRecord::AttributeRemoved { node, .. }
            | MutationRecord::TextChanged { node, .. }
            | MutationRecord::Moved { node, .. } => node,
        }
    }
}

impl From<MutationRecord> for Mutation {
    fn from(record: MutationRecord) -> Self {
        match record {
            MutationRecord::ChildAdded {
                parent,
                prev,
                subtree,
                ..
            } => Mutation::InsertNode {
                parent,
                prev,
                node: subtree,
            },
            MutationRecord::ChildRemoved { node, .. } => Mutation::RemoveNode { node },
            MutationRecord::AttributeChanged { node, name, value } => {
                Mutation::SetAttribute { node, name, value }
            }
            MutationRecord::AttributeRemoved { node, name } => {
                Mutation::RemoveAttribute { node, name }
            }
            MutationRecord::TextChanged { node, text } => Mutation::SetText { node, text },
            MutationRecord::Moved { node, parent, prev } => {
                Mutation::MoveNode { node, parent, prev }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid position: {0}")]
    InvalidPosition(String),
    #[error("moving {node} under {parent} would create a cycle")]
    Cycle { node: NodeId, parent: NodeId },
    #[error("cannot remove root")]
    CannotRemoveRoot,
    #[error("node id {0} is already in use")]
    DuplicateId(NodeId),
    #[error("node {0} is not an element")]
    NotAnElement(NodeId),
    #[error("node {0} has no text")]
    NotText(NodeId),
    #[error("invalid attribute name {0:?}")]
    InvalidAttributeName(String),
    #[error("attribute {0} is reserved for node identity")]
    ReservedAttribute(String),
}

/// Whether `name` can be written as an HTML attribute name and parsed back.
pub fn is_valid_attribute_name(name: &str) -> bool {
    !name.is_empty()
        && name.chars().all(|c| {
            !c.is_whitespace()
                && !c.is_control()
                && !matches!(c, '"' | '\'' | '>' | '/' | '=' | '<')
        })
}

fn is_reserved_attribute(name: &str) -> bool {
    name.eq_ignore_ascii_case(IDENTITY_ATTR) || name.eq_ignore_ascii_case(TEXT_IDENTITY_ATTR)
}

/// A parsed HTML document. Single-writer; `Clone` to fork.
#[derive(Debug, Clone)]
pub struct DomDocument {
    root: NodeId,
    nodes: HashMap<NodeId, DomNode>,
    base_url: Option<Url>,
    next_id: u64,
}

impl DomDocument {
    /// Builds a document from an element fragment. Missing ids are allocated
    /// above `next_id` and above every numeric id already in the fragment.
    pub fn from_fragment(root: Fragment, next_id: u64) -> Result<Self, DomError> {
        if !matches!(root.data, NodeData::Element(_)) {
            return Err(DomError::InvalidPosition("root must be an element".into()));
        }
        let mut doc = DomDocument {
            root: NodeId::new("0"),
            nodes: HashMap::new(),
            base_url: None,
            next_id: next_id.max(1),
        };
        doc.check_fragment(&root)?;
        doc.reserve_fragment_ids(&root);
        let root_id = doc.materialize(root, None);
        doc.root = root_id;
        Ok(doc)
    }

    pub fn root(&self) -> &NodeId {
        &self.root
    }

    pub fn base_url(&self) -> Option<&Url> {
        self.base_url.as_ref()
    }

    pub fn set_base_url(&mut self, url: Option<Url>) {
        self.base_url = url;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node(&self, id: &NodeId) -> Option<&DomNode> {
        self.nodes.get(id)
    }

    pub fn parent(&self, id: &NodeId) -> Option<&NodeId> {
        self.nodes.get(id).and_then(|n| n.parent.as_ref())
    }

    pub fn children(&self, id: &NodeId) -> &[NodeId] {
        self.nodes.get(id).map(|n| n.children.as_slice()).unwrap_or(&[])
    }

    pub fn element(&self, id: &NodeId) -> Option<&Element> {
        self.nodes.get(id).and_then(DomNode::as_element)
    }

    pub fn tag(&self, id: &NodeId) -> Option<&str> {
        self.element(id).map(|e| e.tag.as_str())
    }

    pub fn attr(&self, id: &NodeId, name: &str) -> Option<&str> {
        self.element(id).and_then(|e| e.attributes.get(name))
    }

    pub fn is_element(&self, id: &NodeId) -> bool {
        self.element(id).is_some()
    }

    pub fn element_children<'a>(&'a self, id: &NodeId) -> impl Iterator<Item = &'a NodeId> + 'a {
        self.children(id).iter().filter(move |c| self.is_element(c))
    }

    fn child_element_by_tag(&self, parent: &NodeId, tag: &str) -> Option<NodeId> {
        self.element_children(parent)
            .find(|c| self.tag(c) == Some(tag))
            .cloned()
    }

    pub fn head(&self) -> Option<NodeId> {
        self.child_element_by_tag(&self.root, "head")
    }

    pub fn body(&self) -> Option<NodeId> {
        self.child_element_by_tag(&self.root, "body")
    }

    pub fn prev_sibling(&self, id: &NodeId) -> Option<NodeId> {
        let parent = self.parent(id)?;
        let siblings = self.children(parent);
        let idx = siblings.iter().position(|c| c == id)?;
        idx.checked_sub(1).map(|i| siblings[i].clone())
    }

    /// `ancestor` is `node` or one of its ancestors.
    pub fn is_inclusive_ancestor(&self, ancestor: &NodeId, node: &NodeId) -> bool {
        let mut cur = Some(node);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.parent(c);
        }
        false
    }

    pub fn ancestors<'a>(&'a self, id: &NodeId) -> impl Iterator<Item = &'a NodeId> + 'a {
        let mut cur = self.parent(id);
        std::iter::from_fn(move || {
            let c = cur?;
            cur = self.parent(c);
            Some(c)
        })
    }

    /// Pre-order traversal of the subtree at `id`, including `id` itself.
    pub fn descendants(&self, id: &NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        if !self.contains(id) {
            return out;
        }
        let mut stack = vec![id.clone()];
        while let Some(n) = stack.pop() {
            stack.extend(self.children(&n).iter().rev().cloned());
            out.push(n);
        }
        out
    }

    /// All elements of the document in document order.
    pub fn elements(&self) -> Vec<NodeId> {
        self.descendants(&self.root)
            .into_iter()
            .filter(|n| self.is_element(n))
            .collect()
    }

    /// Looks up an element by its HTML `id` attribute.
    pub fn find_by_html_id(&self, html_id: &str) -> Option<NodeId> {
        self.descendants(&self.root)
            .into_iter()
            .find(|n| self.attr(n, "id") == Some(html_id))
    }

    /// Allocates a fresh identity.
    pub fn allocate_id(&mut self) -> NodeId {
        loop {
            let id = NodeId::new(self.next_id.to_string());
            self.next_id += 1;
            if !self.nodes.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Ensures future allocations start at or above `next`.
    pub fn reserve_ids(&mut self, next: u64) {
        self.next_id = self.next_id.max(next);
    }

    /// Deep copy of the subtree at `id` with identities filled in.
    pub fn fragment(&self, id: &NodeId) -> Option<Fragment> {
        let node = self.nodes.get(id)?;
        Some(Fragment {
            id: Some(id.clone()),
            data: node.data.clone(),
            children: node
                .children
                .iter()
                .filter_map(|c| self.fragment(c))
                .collect(),
        })
    }

    pub(crate) fn element_mut(&mut self, id: &NodeId) -> Option<&mut Element> {
        match self.nodes.get_mut(id).map(|n| &mut n.data) {
            Some(NodeData::Element(e)) => Some(e),
            _ => None,
        }
    }

    /// Writes the identity attribute on every element.
    pub fn stamp_identities(&mut self) {
        for node in self.nodes.values_mut() {
            if let NodeData::Element(e) = &mut node.data {
                e.attributes.set(IDENTITY_ATTR, node.id.as_str());
            }
        }
    }

    /// Applies a mutation. Returns `None` when the mutation changes nothing.
    /// On error the document is left unchanged.
    pub fn mutate(&mut self, mutation: Mutation) -> Result<Option<MutationRecord>, DomError> {
        match mutation {
            Mutation::InsertNode { parent, prev, node } => {
                self.check_position(&parent, prev.as_ref(), None)?;
                self.check_fragment(&node)?;
                self.reserve_fragment_ids(&node);
                let id = self.materialize(node, Some(&parent));
                self.link(&parent, prev.as_ref(), &id);
                let subtree = self.fragment(&id).expect("just inserted");
                Ok(Some(MutationRecord::ChildAdded {
                    node: id,
                    parent,
                    prev,
                    subtree,
                }))
            }
            Mutation::RemoveNode { node } => {
                let parent = self.require(&node)?.parent.clone();
                let Some(parent) = parent else {
                    return Err(DomError::CannotRemoveRoot);
                };
                self.unlink(&node);
                for n in self.descendants(&node) {
                    self.nodes.remove(&n);
                }
                Ok(Some(MutationRecord::ChildRemoved { node, parent }))
            }
            Mutation::SetAttribute { node, name, value } => {
                let name = name.to_ascii_lowercase();
                if !is_valid_attribute_name(&name) {
                    return Err(DomError::InvalidAttributeName(name));
                }
                if is_reserved_attribute(&name) {
                    return Err(DomError::ReservedAttribute(name));
                }
                let el = self.require_element_mut(&node)?;
                if el.attributes.get(&name) == Some(value.as_str()) {
                    return Ok(None);
                }
                el.attributes.set(&name, value.clone());
                Ok(Some(MutationRecord::AttributeChanged { node, name, value }))
            }
            Mutation::RemoveAttribute { node, name } => {
                let name = name.to_ascii_lowercase();
                if is_reserved_attribute(&name) {
                    return Err(DomError::ReservedAttribute(name));
                }
                let el = self.require_element_mut(&node)?;
                match el.attributes.remove(&name) {
                    Some(_) => Ok(Some(MutationRecord::AttributeRemoved { node, name })),
                    None => Ok(None),
                }
            }
            Mutation::SetText { node, text } => {
                let n = self
                    .nodes
                    .get_mut(&node)
                    .ok_or_else(|| DomError::UnknownNode(node.clone()))?;
                match &mut n.data {
                    NodeData::Text(t) | NodeData::Comment(t) => {
                        if *t == text {
                            return Ok(None);
                        }
                        *t = text.clone();
                        Ok(Some(MutationRecord::TextChanged { node, text }))
                    }
                    NodeData::Element(_) => Err(DomError::NotText(node)),
                }
            }
            Mutation::MoveNode { node, parent, prev } => {
                let current_parent = self.require(&node)?.parent.clone();
                if current_parent.is_none() {
                    return Err(DomError::InvalidPosition("cannot move root".into()));
                }
                self.check_position(&parent, prev.as_ref(), Some(&node))?;
                if self.is_inclusive_ancestor(&node, &parent) {
                    return Err(DomError::Cycle { node, parent });
                }
                if current_parent.as_ref() == Some(&parent) && self.prev_sibling(&node) == prev {
                    return Ok(None);
                }
                self.unlink(&node);
                self.link(&parent, prev.as_ref(), &node);
                Ok(Some(MutationRecord::Moved { node, parent, prev }))
            }
        }
    }

    /// Replays a record produced by [`DomDocument::mutate`] on another copy.
    pub fn apply_record(&mut self, record: &MutationRecord) -> Result<(), DomError> {
        self.mutate(record.clone().into()).map(|_| ())
    }

    fn require(&self, id: &NodeId) -> Result<&DomNode, DomError> {
        self.nodes
            .get(id)
            .ok_or_else(|| DomError::UnknownNode(id.clone()))
    }

    fn require_element_mut(&mut self, id: &NodeId) -> Result<&mut Element, DomError> {
        match self.nodes.get_mut(id) {
            None => Err(DomError::UnknownNode(id.clone())),
            Some(DomNode {
                data: NodeData::Element(e),
                ..
            }) => Ok(e),
            Some(_) => Err(DomError::NotAnElement(id.clone())),
        }
    }

    /// `moving` is excluded when checking `prev`, since it is detached first.
    fn check_position(
        &self,
        parent: &NodeId,
        prev: Option<&NodeId>,
        moving: Option<&NodeId>,
    ) -> Result<(), DomError> {
        let p = self.require(parent)?;
        if p.as_element().is_none() {
            return Err(DomError::InvalidPosition(format!(
                "{parent} is not an element and cannot have children"
            )));
        }
        if let Some(prev) = prev {
            self.require(prev)?;
            if Some(prev) == moving {
                return Err(DomError::InvalidPosition(format!(
                    "{prev} cannot be placed after itself"
                )));
            }
            if self.parent(prev) != Some(parent) {
                return Err(DomError::InvalidPosition(format!(
                    "{prev} is not a child of {parent}"
                )));
            }
        }
        Ok(())
    }

    fn check_fragment(&self, fragment: &Fragment) -> Result<(), DomError> {
        let mut ids = Vec::new();
        fragment.ids(&mut ids);
        let mut seen = HashSet::new();
        for id in ids {
            if self.nodes.contains_key(id) || !seen.insert(id) {
                return Err(DomError::DuplicateId(id.clone()));
            }
        }
        check_fragment_shape(fragment)
    }

    fn reserve_fragment_ids(&mut self, fragment: &Fragment) {
        let mut ids = Vec::new();
        fragment.ids(&mut ids);
        if let Some(max) = ids.iter().filter_map(|id| id.numeric()).max() {
            self.next_id = self.next_id.max(max + 1);
        }
    }

    fn materialize(&mut self, fragment: Fragment, parent: Option<&NodeId>) -> NodeId {
        let id = match fragment.id {
            Some(id) => id,
            None => self.allocate_id(),
        };
        let mut data = fragment.data;
        if let NodeData::Element(e) = &mut data {
            e.attributes.remove(TEXT_IDENTITY_ATTR);
            if e.attributes.contains(IDENTITY_ATTR) {
                e.attributes.set(IDENTITY_ATTR, id.as_str());
            }
        }
        self.nodes.insert(
            id.clone(),
            DomNode {
                id: id.clone(),
                parent: parent.cloned(),
                children: Vec::new(),
                data,
            },
        );
        let children: Vec<NodeId> = fragment
            .children
            .into_iter()
            .map(|c| self.materialize(c, Some(&id)))
            .collect();
        self.nodes.get_mut(&id).expect("inserted").children = children;
        id
    }

    fn unlink(&mut self, id: &NodeId) {
        if let Some(parent) = self.nodes.get_mut(id).and_then(|n| n.parent.take()) {
            if let Some(p) = self.nodes.get_mut(&parent) {
                p.children.retain(|c| c != id);
            }
        }
    }

    fn link(&mut self, parent: &NodeId, prev: Option<&NodeId>, id: &NodeId) {
        let p = self.nodes.get_mut(parent).expect("checked parent");
        let idx = match prev {
            None => 0,
            Some(prev) => p.children.iter().position(|c| c == prev).expect("checked prev") + 1,
        };
        p.children.insert(idx, id.clone());
        self.nodes.get_mut(id).expect("linked node").parent = Some(parent.clone());
    }

    /// Checks the tree invariants. Used by tests after every operation.
    pub fn validate(&self) -> Result<(), String> {
        let root = self
            .nodes
            .get(&self.root)
            .ok_or_else(|| format!("root {} missing", self.root))?;
        if root.parent.is_some() {
            return Err("root has a parent".into());
        }
        if root.as_element().is_none() {
            return Err("root is not an element".into());
        }
        let mut seen = HashSet::new();
        let mut stack = vec![self.root.clone()];
        while let Some(id) = stack.pop() {
            if !seen.insert(id.clone()) {
                return Err(format!("{id} reachable twice"));
            }
            let node = self
                .nodes
                .get(&id)
                .ok_or_else(|| format!("dangling child {id}"))?;
            if node.id != id {
                return Err(format!("{id} stored under wrong key"));
            }
            if !node.children.is_empty() && node.as_element().is_none() {
                return Err(format!("non-element {id} has children"));
            }
            for c in &node.children {
                let child = self
                    .nodes
                    .get(c)
                    .ok_or_else(|| format!("dangling child {c} of {id}"))?;
                if child.parent.as_ref() != Some(&id) {
                    return Err(format!("{c} does not point back to parent {id}"));
                }
                stack.push(c.clone());
            }
            if let NodeData::Element(e) = &node.data {
                let mut names = HashSet::new();
                for (n, _) in e.attributes.iter() {
                    if n != n.to_ascii_lowercase() || !names.insert(n) {
                        return Err(format!("bad attribute {n:?} on {id}"));
                    }
                }
                if let Some(v) = e.attributes.get(IDENTITY_ATTR) {
                    if v != id.as_str() {
                        return Err(format!("{id} carries identity attribute {v}"));
                    }
                }
            }
        }
        if seen.len() != self.nodes.len() {
            return Err(format!(
                "{} nodes unreachable from root",
                self.nodes.len() - seen.len()
            ));
        }
        Ok(())
    }

    /// Order-insensitive canonical rendering of a subtree. Two subtrees are
    /// structurally equal iff their canonical strings are equal: same
    /// identities, tags, attributes (excluding the identity attribute), text
    /// and child order.
    pub fn canonical_subtree(&self, id: &NodeId) -> String {
        let mut out = String::new();
        self.write_canonical(id, &mut out);
        out
    }

    pub fn canonical(&self) -> String {
        self.canonical_subtree(&self.root)
    }

    fn write_canonical(&self, id: &NodeId, out: &mut String) {
        use std::fmt::Write;
        let Some(node) = self.nodes.get(id) else {
            return;
        };
        match &node.data {
            NodeData::Element(e) => {
                let _ = write!(out, "<{}#{}", e.tag, id);
                for (n, v) in e.attributes.sorted() {
                    if n != IDENTITY_ATTR {
                        let _ = write!(out, " {n}={v:?}");
                    }
                }
                out.push('>');
                for c in &node.children {
                    self.write_canonical(c, out);
                }
                let _ = write!(out, "</{}>", e.tag);
            }
            NodeData::Text(t) => {
                let _ = write!(out, "[text#{id} {t:?}]");
            }
            NodeData::Comment(t) => {
                let _ = write!(out, "[comment#{id} {t:?}]");
            }
        }
    }

    pub fn structurally_eq(&self, other: &DomDocument) -> bool {
        self.canonical() == other.canonical()
    }
}

fn check_fragment_shape(fragment: &Fragment) -> Result<(), DomError> {
    match &fragment.data {
        NodeData::Element(e) => {
            if e.tag.is_empty() || e.tag.chars().any(|c| c.is_whitespace() || c == '<' || c == '>' || c == '/') {
                return Err(DomError::InvalidPosition(format!("invalid tag {:?}", e.tag)));
            }
            for (n, _) in e.attributes.iter() {
                if !is_valid_attribute_name(n) {
                    return Err(DomError::InvalidAttributeName(n.to_string()));
                }
            }
            if let (Some(id), Some(attr)) = (&fragment.id, e.attributes.get(IDENTITY_ATTR)) {
                if attr != id.as_str() {
                    return Err(DomError::InvalidPosition(format!(
                        "identity attribute {attr} disagrees with node id {id}"
                    )));
                }
            }
        }
        NodeData::Text(_) | NodeData::Comment(_) => {
            if !fragment.children.is_empty() {
                return Err(DomError::InvalidPosition(
                    "text and comment nodes cannot have children".into(),
                ));
            }
        }
    }
    fragment.children.iter().try_for_each(check_fragment_shape)
}
