//! Element-to-device mapping.
//!
//! A [`MappingQuery`] is evaluated against a document and yields two
//! [`DeviceLists`]: elements for the primary device and elements for the
//! secondary device. Leaves are either semantic criteria (element classes) or
//! screen regions; leaves combine with AND, OR and NOT.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{Attributes, DomDocument, NodeId};

pub const INTERACTIVE_TAGS: &[&str] = &[
    "a", "area", "button", "datalist", "form", "input", "keygen", "textarea", "nav", "optgroup",
    "option", "output", "select",
];
pub const MULTIMEDIA_TAGS: &[&str] = &["video", "audio", "source", "track"];
pub const VISUAL_TAGS: &[&str] = &[
    "caption", "dialog", "figcaption", "h1", "h2", "h3", "h4", "h5", "h6", "hgroup", "img", "kbd",
    "label", "legend", "object", "p", "progress",
];
pub const COMPOSITE_TAGS: &[&str] = &["div", "table", "iframe"];

pub const DEFAULT_REGION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementClass {
    Interactive,
    Multimedia,
    Visual,
    Other,
    Composite,
}

impl fmt::Display for ElementClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ElementClass::Interactive => "Interactive",
            ElementClass::Multimedia => "Multimedia",
            ElementClass::Visual => "Visual",
            ElementClass::Other => "Other",
            ElementClass::Composite => "Composite",
        };
        f.write_str(s)
    }
}

/// Class of a tag according to the membership tables alone.
pub fn table_class(tag: &str) -> ElementClass {
    if COMPOSITE_TAGS.contains(&tag) {
        ElementClass::Composite
    } else if INTERACTIVE_TAGS.contains(&tag) {
        ElementClass::Interactive
    } else if MULTIMEDIA_TAGS.contains(&tag) {
        ElementClass::Multimedia
    } else if VISUAL_TAGS.contains(&tag) {
        ElementClass::Visual
    } else {
        ElementClass::Other
    }
}

/// A declarative listener is any attribute named `on*`.
pub fn has_declarative_listener(attributes: &Attributes) -> bool {
    attributes
        .iter()
        .any(|(n, _)| n.len() > 2 && n.starts_with("on"))
}

/// Classifies an element. Non-composite elements with a declarative listener
/// become interactive.
pub fn classify_element(tag: &str, attributes: &Attributes) -> ElementClass {
    match table_class(tag) {
        ElementClass::Composite => ElementClass::Composite,
        _ if has_declarative_listener(attributes) => ElementClass::Interactive,
        class => class,
    }
}

fn classify_node(doc: &DomDocument, id: &NodeId) -> Option<ElementClass> {
    doc.element(id)
        .map(|e| classify_element(&e.tag, &e.attributes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticCriterion {
    pub classes: BTreeSet<ElementClass>,
}

impl SemanticCriterion {
    pub fn new(classes: impl IntoIterator<Item = ElementClass>) -> Self {
        SemanticCriterion {
            classes: classes.into_iter().collect(),
        }
    }
}

/// Rectangle in CSS pixels relative to the viewport's top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "w")]
    pub width: f64,
    #[serde(rename = "h")]
    pub height: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Rect { x, y, width, height }
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    fn is_valid(&self) -> bool {
        [self.x, self.y, self.width, self.height]
            .iter()
            .all(|v| v.is_finite())
            && self.width >= 0.0
            && self.height >= 0.0
    }

    fn intersection_area(&self, other: &Rect) -> f64 {
        let w = (self.x + self.width).min(other.x + other.width) - self.x.max(other.x);
        let h = (self.y + self.height).min(other.y + other.height) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Half-open containment, so an empty rectangle contains nothing.
    fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

pub type Region = Rect;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionCriterion {
    pub rect: Region,
}

/// Whether an element's box counts as inside `region`.
pub fn in_region(bbox: &Rect, region: &Region, threshold: f64) -> bool {
    let area = bbox.area();
    if area <= 0.0 {
        return region.contains_point(bbox.x + bbox.width / 2.0, bbox.y + bbox.height / 2.0);
    }
    bbox.intersection_area(region) / area >= threshold
}

/// Bounding boxes keyed by node identity. Absent entries mean "not rendered".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GeometryTable {
    pub entries: BTreeMap<NodeId, Rect>,
}

impl GeometryTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: NodeId, rect: Rect) {
        self.entries.insert(id, rect);
    }

    pub fn get(&self, id: &NodeId) -> Option<&Rect> {
        self.entries.get(id)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces keys written as `#html-id` with the identity of the element
    /// carrying that `id` attribute, so hand-written sidecars need not know
    /// node identities.
    pub fn resolve_html_ids(&self, doc: &DomDocument) -> Result<GeometryTable, MappingError> {
        let mut out = GeometryTable::new();
        for (key, rect) in &self.entries {
            let id = match key.as_str().strip_prefix('#') {
                Some(html_id) => doc
                    .find_by_html_id(html_id)
                    .ok_or_else(|| MappingError::UnknownGeometryElement(html_id.to_string()))?,
                None => key.clone(),
            };
            out.insert(id, *rect);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Criterion {
    Semantic(SemanticCriterion),
    Region(RegionCriterion),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QueryJson", into = "QueryJson")]
pub enum MappingQuery {
    Leaf(Criterion),
    And(Vec<MappingQuery>),
    Or(Vec<MappingQuery>),
    Not(Box<MappingQuery>),
}

impl MappingQuery {
    pub fn semantic(classes: impl IntoIterator<Item = ElementClass>) -> Self {
        MappingQuery::Leaf(Criterion::Semantic(SemanticCriterion::new(classes)))
    }

    pub fn region(rect: Rect) -> Self {
        MappingQuery::Leaf(Criterion::Region(RegionCriterion { rect }))
    }

    pub fn and(children: Vec<MappingQuery>) -> Self {
        MappingQuery::And(children)
    }

    pub fn or(children: Vec<MappingQuery>) -> Self {
        MappingQuery::Or(children)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(child: MappingQuery) -> Self {
        MappingQuery::Not(Box::new(child))
    }

    pub fn has_region(&self) -> bool {
        match self {
            MappingQuery::Leaf(Criterion::Region(_)) => true,
            MappingQuery::Leaf(Criterion::Semantic(_)) => false,
            MappingQuery::And(c) | MappingQuery::Or(c) => c.iter().any(MappingQuery::has_region),
            MappingQuery::Not(c) => c.has_region(),
        }
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        match self {
            MappingQuery::Leaf(Criterion::Semantic(s)) if s.classes.is_empty() => Err(
                MappingError::InvalidQuery("semantic criterion needs at least one class".into()),
            ),
            MappingQuery::Leaf(Criterion::Region(r)) if !r.rect.is_valid() => Err(
                MappingError::InvalidQuery(format!("invalid region {:?}", r.rect)),
            ),
            MappingQuery::Leaf(_) => Ok(()),
            MappingQuery::And(c) | MappingQuery::Or(c) => {
                if c.is_empty() {
                    return Err(MappingError::InvalidQuery(
                        "combinator needs at least one child".into(),
                    ));
                }
                c.iter().try_for_each(MappingQuery::validate)
            }
            MappingQuery::Not(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueryJson {
    op: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    children: Vec<QueryJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    criterion: Option<CriterionJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum CriterionJson {
    Semantic { classes: Vec<ElementClass> },
    Region { x: f64, y: f64, w: f64, h: f64 },
}

impl TryFrom<QueryJson> for MappingQuery {
    type Error = MappingError;

    fn try_from(q: QueryJson) -> Result<Self, Self::Error> {
        let mut children = q
            .children
            .into_iter()
            .map(MappingQuery::try_from)
            .collect::<Result<Vec<_>, _>>()?;
        let query = match q.op.as_str() {
            "leaf" => {
                if !children.is_empty() {
                    return Err(MappingError::InvalidQuery("leaf cannot have children".into()));
                }
                match q.criterion {
                    Some(CriterionJson::Semantic { classes }) => MappingQuery::semantic(classes),
                    Some(CriterionJson::Region { x, y, w, h }) => {
                        MappingQuery::region(Rect::new(x, y, w, h))
                    }
                    None => {
                        return Err(MappingError::InvalidQuery("leaf needs a criterion".into()))
                    }
                }
            }
            "and" => MappingQuery::And(children),
            "or" => MappingQuery::Or(children),
            "not" => {
                if children.len() != 1 {
                    return Err(MappingError::InvalidQuery("not takes exactly one child".into()));
                }
                MappingQuery::Not(Box::new(children.remove(0)))
            }
            other => return Err(MappingError::InvalidQuery(format!("unknown op {other:?}"))),
        };
        query.validate()?;
        Ok(query)
    }
}

impl From<MappingQuery> for QueryJson {
    fn from(q: MappingQuery) -> Self {
        let node = |op: &str, children: Vec<MappingQuery>| QueryJson {
            op: op.to_string(),
            children: children.into_iter().map(QueryJson::from).collect(),
            criterion: None,
        };
        match q {
            MappingQuery::Leaf(c) => QueryJson {
                op: "leaf".into(),
                children: Vec::new(),
                criterion: Some(match c {
                    Criterion::Semantic(s) => CriterionJson::Semantic {
                        classes: s.classes.into_iter().collect(),
                    },
                    Criterion::Region(r) => CriterionJson::Region {
                        x: r.rect.x,
                        y: r.rect.y,
                        w: r.rect.width,
                        h: r.rect.height,
                    },
                }),
            },
            MappingQuery::And(c) => node("and", c),
            MappingQuery::Or(c) => node("or", c),
            MappingQuery::Not(c) => node("not", vec![*c]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MappingError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("geometry names element #{0}, which the document does not have")]
    UnknownGeometryElement(String),
}

/// Per-device element lists, both in document order and disjoint. They need
/// not cover every element.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceLists {
    pub primary: Vec<NodeId>,
    pub secondary: Vec<NodeId>,
}

impl DeviceLists {
    pub fn is_disjoint(&self) -> bool {
        let p: HashSet<_> = self.primary.iter().collect();
        self.secondary.iter().all(|s| !p.contains(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingOptions {
    pub region_threshold: f64,
}

impl Default for MappingOptions {
    fn default() -> Self {
        MappingOptions {
            region_threshold: DEFAULT_REGION_THRESHOLD,
        }
    }
}

/// Referrer/referee pairs that must stay on the same device: `label@for`,
/// `input@list` (to a datalist) and `output@for`.
pub fn semantic_links(doc: &DomDocument) -> Vec<(NodeId, NodeId)> {
    let elements = doc.elements();
    let mut by_id: HashMap<&str, &NodeId> = HashMap::new();
    for e in &elements {
        if let Some(id) = doc.attr(e, "id") {
            by_id.entry(id).or_insert(e);
        }
    }
    let mut links = Vec::new();
    for e in &elements {
        let tag = doc.tag(e).unwrap_or_default();
        match tag {
            "label" => {
                if let Some(target) = doc.attr(e, "for").and_then(|f| by_id.get(f.trim())) {
                    if *target != e {
                        links.push((e.clone(), (*target).clone()));
                    }
                }
            }
            "input" => {
                if let Some(target) = doc.attr(e, "list").and_then(|l| by_id.get(l.trim())) {
                    if doc.tag(target) == Some("datalist") {
                        links.push((e.clone(), (*target).clone()));
                    }
                }
            }
            "output" => {
                if let Some(list) = doc.attr(e, "for") {
                    for token in list.split_ascii_whitespace() {
                        if let Some(target) = by_id.get(token) {
                            if *target != e {
                                links.push((e.clone(), (*target).clone()));
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    links
}

/// Body descendants in document order (body itself excluded).
fn body_elements(doc: &DomDocument) -> Vec<NodeId> {
    let Some(body) = doc.body() else {
        return Vec::new();
    };
    doc.descendants(&body)
        .into_iter()
        .skip(1)
        .filter(|n| doc.is_element(n))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Primary,
    Secondary,
}

/// Working assignment used while building lists.
#[derive(Debug, Default)]
struct Assignment {
    sides: HashMap<NodeId, Side>,
}

impl Assignment {
    fn get(&self, id: &NodeId) -> Option<Side> {
        self.sides.get(id).copied()
    }

    fn set(&mut self, id: &NodeId, side: Side) -> bool {
        self.sides.insert(id.clone(), side) != Some(side)
    }

    fn into_lists(self, doc: &DomDocument) -> DeviceLists {
        let mut lists = DeviceLists::default();
        for e in doc.elements() {
            match self.get(&e) {
                Some(Side::Primary) => lists.primary.push(e),
                Some(Side::Secondary) => lists.secondary.push(e),
                None => {}
            }
        }
        lists
    }

    /// Moves primary elements nested in secondary ones to the secondary side,
    /// since hiding a secondary element on the master hides its subtree.
    fn normalize_nesting(&mut self, doc: &DomDocument) -> bool {
        let mut changed = false;
        let Some(body) = doc.body() else {
            return false;
        };
        let mut stack = vec![(body, false)];
        while let Some((node, under_secondary)) = stack.pop() {
            let mut here = under_secondary;
            match self.get(&node) {
                Some(Side::Secondary) => here = true,
                Some(Side::Primary) if under_secondary => {
                    self.set(&node, Side::Secondary);
                    changed = true;
                }
                _ => {}
            }
            for c in doc.element_children(&node) {
                stack.push((c.clone(), here));
            }
        }
        changed
    }

    /// Keeps linked elements together. Conflicting pairs go to the secondary side.
    fn enforce_links(&mut self, links: &[(NodeId, NodeId)]) -> bool {
        let mut changed = false;
        for (a, b) in links {
            match (self.get(a), self.get(b)) {
                (Some(sa), None) => changed |= self.set(b, sa),
                (None, Some(sb)) => changed |= self.set(a, sb),
                (Some(sa), Some(sb)) if sa != sb => {
                    changed |= self.set(a, Side::Secondary);
                    changed |= self.set(b, Side::Secondary);
                }
                _ => {}
            }
        }
        changed
    }

    fn close(&mut self, doc: &DomDocument) {
        let links = semantic_links(doc);
        loop {
            let a = self.enforce_links(&links);
            let b = self.normalize_nesting(doc);
            if !a && !b {
                break;
            }
        }
    }
}

/// Semantic mapping: walks the body in document order, assigning elements
/// whose class is requested to the secondary list and other classified
/// elements to the primary list. Composite and `Other` elements stay
/// unassigned. Linked elements are then kept together.
pub fn map_semantic(doc: &DomDocument, criterion: &SemanticCriterion) -> DeviceLists {
    let mut assignment = Assignment::default();
    for e in body_elements(doc) {
        let Some(class) = classify_node(doc, &e) else {
            continue;
        };
        if class == ElementClass::Composite {
            continue;
        }
        if criterion.classes.contains(&class) {
            assignment.set(&e, Side::Secondary);
        } else if class != ElementClass::Other {
            assignment.set(&e, Side::Primary);
        }
    }
    assignment.close(doc);
    assignment.into_lists(doc)
}

/// Region mapping: elements with known geometry go to the secondary list
/// when at least `threshold` of their box lies inside the region, to the
/// primary list otherwise. Composite elements only decide for themselves when
/// none of their descendants has geometry.
pub fn map_region(
    doc: &DomDocument,
    criterion: &RegionCriterion,
    geometry: &GeometryTable,
    threshold: f64,
) -> DeviceLists {
    let elements = body_elements(doc);
    let mut has_geometric_descendant: HashSet<NodeId> = HashSet::new();
    for e in elements.iter().rev() {
        if geometry.get(e).is_some() || has_geometric_descendant.contains(e) {
            for a in doc.ancestors(e) {
                if !has_geometric_descendant.insert(a.clone()) {
                    break;
                }
            }
        }
    }
    let mut assignment = Assignment::default();
    for e in &elements {
        let Some(bbox) = geometry.get(e) else {
            continue;
        };
        if classify_node(doc, e) == Some(ElementClass::Composite) && has_geometric_descendant.contains(e) {
            continue;
        }
        let side = if in_region(bbox, &criterion.rect, threshold) {
            Side::Secondary
        } else {
            Side::Primary
        };
        assignment.set(e, side);
    }
    assignment.normalize_nesting(doc);
    assignment.into_lists(doc)
}

/// Evaluates a (possibly combined) query. Each leaf contributes the set of its
/// secondary elements; AND, OR and NOT act on those sets, NOT complementing
/// within the elements its subtree assigned at all.
pub fn evaluate_query(
    doc: &DomDocument,
    query: &MappingQuery,
    geometry: &GeometryTable,
    options: &MappingOptions,
) -> Result<DeviceLists, MappingError> {
    query.validate()?;
    if query.has_region() {
        let known = body_elements(doc).iter().filter(|e| geometry.get(e).is_some()).count();
        if known == 0 {
            tracing::warn!("region query evaluated without geometry for any element");
        }
    }
    let (selected, domain) = eval_sets(doc, query, geometry, options);
    let mut assignment = Assignment::default();
    for e in &domain {
        let side = if selected.contains(e) { Side::Secondary } else { Side::Primary };
        assignment.set(e, side);
    }
    assignment.close(doc);
    Ok(assignment.into_lists(doc))
}

fn eval_sets(
    doc: &DomDocument,
    query: &MappingQuery,
    geometry: &GeometryTable,
    options: &MappingOptions,
) -> (HashSet<NodeId>, HashSet<NodeId>) {
    match query {
        MappingQuery::Leaf(c) => {
            let lists = match c {
                Criterion::Semantic(s) => map_semantic(doc, s),
                Criterion::Region(r) => map_region(doc, r, geometry, options.region_threshold),
            };
            let selected: HashSet<_> = lists.secondary.iter().cloned().collect();
            let domain = lists.primary.into_iter().chain(lists.secondary).collect();
            (selected, domain)
        }
        MappingQuery::And(children) | MappingQuery::Or(children) => {
            let is_and = matches!(query, MappingQuery::And(_));
            let mut iter = children.iter().map(|c| eval_sets(doc, c, geometry, options));
            let (mut selected, mut domain) = iter.next().unwrap_or_default();
            for (s, d) in iter {
                if is_and {
                    selected.retain(|e| s.contains(e));
                } else {
                    selected.extend(s);
                }
                domain.extend(d);
            }
            (selected, domain)
        }
        MappingQuery::Not(child) => {
            let (selected, domain) = eval_sets(doc, child, geometry, options);
            let complement = domain.iter().filter(|e| !selected.contains(*e)).cloned().collect();
            (complement, domain)
        }
    }
}
