//! Seeded random workloads: master mutations and whole documents.
//!
//! Generated mutations keep the document within what an HTML parser would
//! produce (phrasing content only inside phrasing containers, no tables), so
//! that subtrees survive serialization to the slave unchanged.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::annotation::{DeviceAssignment, DEVICE_ATTR};
use crate::dom::{Attributes, DomDocument, Fragment, Mutation, NodeData, NodeId};

const FLOW_CONTAINERS: &[&str] = &[
    "body", "div", "section", "article", "main", "header", "footer", "nav", "aside", "li", "figure",
    "video", "audio", "form",
];
const PHRASING_CONTAINERS: &[&str] = &[
    "p", "span", "b", "i", "em", "strong", "small", "a", "label", "button", "h1", "h2", "h3", "h4",
    "h5", "h6", "figcaption", "legend",
];
const FLOW_ELEMENTS: &[&str] = &["div", "section", "p"];
const PHRASING_ELEMENTS: &[&str] = &["span", "b", "i", "em", "strong", "small"];
const WORDS: &[&str] = &[
    "alpha", "bravo", "charlie", "delta", "echo", "fox", "golf", "hotel", "india", "juliet", "kilo",
    "lima", "a<b", "x&y", "\"q\"", "ünï", "∑",
];
const ATTRIBUTES: &[&str] = &["class", "title", "lang", "data-x", "aria-label", "onclick", "src"];

fn is_flow_container(tag: &str) -> bool {
    FLOW_CONTAINERS.contains(&tag)
}

fn is_phrasing_container(tag: &str) -> bool {
    PHRASING_CONTAINERS.contains(&tag)
}

fn is_container(tag: &str) -> bool {
    is_flow_container(tag) || is_phrasing_container(tag)
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).expect("words")).collect::<Vec<_>>().join(" ")
}

/// Generates random, content-model-safe master mutations.
#[derive(Debug, Clone)]
pub struct MutationGenerator {
    rng: ChaCha8Rng,
    /// Soft cap on body size; above it removals are favoured.
    pub max_nodes: usize,
    /// Whether `data-device` values may change (moving content in and out of scope).
    pub reannotate: bool,
}

impl MutationGenerator {
    pub fn new(rng: ChaCha8Rng) -> Self {
        MutationGenerator { rng, max_nodes: 600, reannotate: true }
    }

    /// A mutation that `doc` accepts. Falls back to a text insertion under the
    /// body when a chosen operation has no candidate.
    pub fn next(&mut self, doc: &DomDocument) -> Mutation {
        let Some(body) = doc.body() else {
            return Mutation::SetAttribute { node: doc.root().clone(), name: "class".into(), value: "x".into() };
        };
        let nodes: Vec<NodeId> = doc.descendants(&body).into_iter().skip(1).filter(|n| !self.in_opaque(doc, n)).collect();
        let elements: Vec<NodeId> = std::iter::once(body.clone())
            .chain(nodes.iter().filter(|n| doc.is_element(n)).cloned())
            .collect();
        let crowded = nodes.len() > self.max_nodes;
        for _ in 0..8 {
            let roll: u32 = self.rng.gen_range(0..100);
            let m = match roll {
                _ if crowded && roll < 50 => self.remove(&nodes),
                0..=19 => self.set_attribute(&elements),
                20..=24 => self.remove_attribute(doc, &elements),
                25..=44 => self.set_text(doc, &nodes),
                45..=69 => self.insert(doc, &elements),
                70..=79 => self.remove(&nodes),
                80..=94 => self.move_node(doc, &nodes, &elements),
                _ if self.reannotate => self.set_device(&elements),
                _ => self.set_attribute(&elements),
            };
            if let Some(m) = m {
                return m;
            }
        }
        Mutation::InsertNode { parent: body, prev: None, node: Fragment::text(words(&mut self.rng, 1)) }
    }

    /// Nodes inside elements whose content is not ordinary markup.
    fn in_opaque(&self, doc: &DomDocument, n: &NodeId) -> bool {
        std::iter::once(n).chain(doc.ancestors(n)).any(|a| {
            matches!(
                doc.tag(a),
                Some("script" | "style" | "textarea" | "title" | "select" | "option" | "table" | "pre" | "noscript" | "template")
            )
        })
    }

    fn set_attribute(&mut self, elements: &[NodeId]) -> Option<Mutation> {
        let node = elements.choose(&mut self.rng)?.clone();
        let name = (*ATTRIBUTES.choose(&mut self.rng)?).to_string();
        let n = self.rng.gen_range(1..3);
        let value = if name == "src" { format!("img/{}.png", self.rng.gen_range(0..100)) } else { words(&mut self.rng, n) };
        Some(Mutation::SetAttribute { node, name, value })
    }

    fn remove_attribute(&mut self, doc: &DomDocument, elements: &[NodeId]) -> Option<Mutation> {
        let node = elements.choose(&mut self.rng)?.clone();
        let names: Vec<String> = doc
            .element(&node)?
            .attributes
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| !n.starts_with("data-vs-") && (self.reannotate || n != DEVICE_ATTR))
            .collect();
        let name = names.choose(&mut self.rng)?.clone();
        Some(Mutation::RemoveAttribute { node, name })
    }

    fn set_device(&mut self, elements: &[NodeId]) -> Option<Mutation> {
        let node = elements.choose(&mut self.rng)?.clone();
        let value = *[DeviceAssignment::Device1, DeviceAssignment::Device2, DeviceAssignment::Both].choose(&mut self.rng)?;
        Some(Mutation::SetAttribute { node, name: DEVICE_ATTR.into(), value: value.token().into() })
    }

    fn set_text(&mut self, doc: &DomDocument, nodes: &[NodeId]) -> Option<Mutation> {
        let texts: Vec<&NodeId> = nodes.iter().filter(|n| matches!(doc.node(n).map(|n| &n.data), Some(NodeData::Text(_)))).collect();
        let node = (*texts.choose(&mut self.rng)?).clone();
        let n = self.rng.gen_range(1..4);
        Some(Mutation::SetText { node, text: words(&mut self.rng, n) })
    }

    fn random_prev(&mut self, doc: &DomDocument, parent: &NodeId, exclude: Option<&NodeId>) -> Option<NodeId> {
        let children: Vec<&NodeId> = doc.children(parent).iter().filter(|c| Some(*c) != exclude).collect();
        let i = self.rng.gen_range(0..=children.len());
        (i > 0).then(|| children[i - 1].clone())
    }

    fn insert(&mut self, doc: &DomDocument, elements: &[NodeId]) -> Option<Mutation> {
        let parents: Vec<&NodeId> = elements.iter().filter(|e| doc.tag(e).is_some_and(is_container)).collect();
        let parent = (*parents.choose(&mut self.rng)?).clone();
        let flow = doc.tag(&parent).is_some_and(is_flow_container);
        let n = self.rng.gen_range(1..3);
        let text = Fragment::text(words(&mut self.rng, n));
        let node = match self.rng.gen_range(0..3) {
            0 => text,
            _ => {
                let pool = if flow && self.rng.gen_bool(0.5) { FLOW_ELEMENTS } else { PHRASING_ELEMENTS };
                let mut el = Fragment::element(pool.choose(&mut self.rng)?);
                if self.rng.gen_bool(0.3) {
                    el = el.with_attr("class", &words(&mut self.rng, 1));
                }
                if self.rng.gen_bool(0.8) {
                    el = el.with_child(text);
                }
                el
            }
        };
        let prev = self.random_prev(doc, &parent, None);
        Some(Mutation::InsertNode { parent, prev, node })
    }

    fn remove(&mut self, nodes: &[NodeId]) -> Option<Mutation> {
        let node = nodes.choose(&mut self.rng)?.clone();
        Some(Mutation::RemoveNode { node })
    }

    fn move_node(&mut self, doc: &DomDocument, nodes: &[NodeId], elements: &[NodeId]) -> Option<Mutation> {
        let node = nodes.choose(&mut self.rng)?.clone();
        let allowed: &dyn Fn(&str) -> bool = match doc.tag(&node) {
            None => &is_container,
            Some(t) if PHRASING_ELEMENTS.contains(&t) => &is_container,
            Some(t) if FLOW_ELEMENTS.contains(&t) => &is_flow_container,
            Some(_) => return None,
        };
        let parents: Vec<&NodeId> = elements
            .iter()
            .filter(|e| doc.tag(e).is_some_and(allowed) && !doc.is_inclusive_ancestor(&node, e))
            .collect();
        let parent = (*parents.choose(&mut self.rng)?).clone();
        let prev = self.random_prev(doc, &parent, Some(&node));
        Some(Mutation::MoveNode { node, parent, prev })
    }
}

/// A random document of at most `max_nodes` elements under the body, for
/// property tests. Elements come from a mix of classified and unclassified tags.
pub fn random_document(rng: &mut ChaCha8Rng, max_nodes: usize) -> DomDocument {
    const TAGS: &[&str] = &[
        "div", "section", "p", "span", "a", "button", "img", "video", "audio", "source", "h1", "h2",
        "label", "input", "nav", "ul", "li", "form", "table", "iframe", "figure", "figcaption",
    ];
    let target = rng.gen_range(1..=max_nodes.max(1));
    let mut body = Fragment::element("body");
    let mut count = 0;
    fn grow(rng: &mut ChaCha8Rng, node: &mut Fragment, depth: usize, budget: &mut usize, count: &mut usize) {
        let children = rng.gen_range(0..5);
        for _ in 0..children {
            if *count >= *budget {
                return;
            }
            let tag = TAGS.choose(rng).expect("tags");
            let mut attrs = Attributes::new();
            if rng.gen_bool(0.1) {
                attrs.set("onclick", "f()");
            }
            if rng.gen_bool(0.1) {
                attrs.set("data-device", "device2");
            }
            let mut child = Fragment { id: None, data: NodeData::element(tag, attrs), children: Vec::new() };
            *count += 1;
            if depth < 12 && rng.gen_bool(0.7) {
                grow(rng, &mut child, depth + 1, budget, count);
            }
            if rng.gen_bool(0.3) {
                child.children.push(Fragment::text("t"));
            }
            node.children.push(child);
        }
    }
    let mut budget = target;
    while count < target {
        let before = count;
        grow(rng, &mut body, 0, &mut budget, &mut count);
        if count == before && rng.gen_bool(0.5) {
            break;
        }
    }
    let root = Fragment::element("html")
        .with_child(Fragment::element("head").with_child(Fragment::element("title").with_child(Fragment::text("r"))))
        .with_child(body);
    DomDocument::from_fragment(root, 1).expect("generated fragment is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dom::parse_html;
    use rand::SeedableRng;

    #[test]
    fn generated_mutations_apply() {
        let mut doc = parse_html(b"<div><p>a</p><video><span>b</span></video></div>", None).unwrap();
        let mut generator = MutationGenerator::new(ChaCha8Rng::seed_from_u64(3));
        for _ in 0..300 {
            let m = generator.next(&doc);
            doc.mutate(m.clone()).unwrap_or_else(|e| panic!("{m:?}: {e}"));
        }
        doc.validate().unwrap();
    }

    #[test]
    fn random_documents_respect_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let doc = random_document(&mut rng, 50);
            let body = doc.body().unwrap();
            let n = doc.descendants(&body).iter().filter(|e| doc.is_element(e)).count() - 1;
            assert!(n <= 50);
            doc.validate().unwrap();
        }
    }
}
