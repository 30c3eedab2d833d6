//! html5ever tree sink and conversion into [`DomDocument`].

use std::borrow::Cow;
use std::collections::HashSet;
use std::io::Read;

use html5ever::interface::{ElementFlags, NodeOrText, QuirksMode, TreeSink};
use html5ever::tendril::{StrTendril, TendrilSink};
use html5ever::{namespace_url, ns, Attribute, ExpandedName, LocalName, QualName};
use thiserror::Error;
use url::Url;

use super::{
    Attributes, DomDocument, Fragment, NodeData, NodeId, IDENTITY_ATTR, TEXT_IDENTITY_ATTR,
};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("failed to read input: {0}")]
    Io(#[from] std::io::Error),
    #[error("input is not valid UTF-8 (at byte {offset})")]
    NotUtf8 { offset: usize },
    #[error("document has no root element")]
    NoRoot,
}

/// Parses an HTML document. Elements carrying a valid, unique `data-vs-id`
/// keep that identity; every other node gets a fresh one.
pub fn parse_html(input: &[u8], base_url: Option<Url>) -> Result<DomDocument, ParseError> {
    let text = std::str::from_utf8(input).map_err(|e| ParseError::NotUtf8 {
        offset: e.valid_up_to(),
    })?;
    let sink = html5ever::parse_document(Sink::new(), Default::default()).one(text);
    let html = sink
        .nodes[0]
        .children
        .iter()
        .copied()
        .find(|&c| matches!(sink.nodes[c].data, SinkData::Element(_)))
        .ok_or(ParseError::NoRoot)?;
    let mut conv = Converter::new(&sink);
    let mut root = conv.convert(html);
    let root = root.pop().ok_or(ParseError::NoRoot)?;
    let mut doc = DomDocument::from_fragment(root, 1).map_err(|_| ParseError::NoRoot)?;
    doc.set_base_url(base_url);
    Ok(doc)
}

/// Reads and parses a document from any byte source.
pub fn parse_html_from<R: Read>(mut reader: R, base_url: Option<Url>) -> Result<DomDocument, ParseError> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    parse_html(&buf, base_url)
}

/// Parses an HTML fragment as if it were the content of a `context` element.
/// Top-level text and comment nodes come back without identity.
pub fn parse_fragment(html: &str, context: &str) -> Vec<Fragment> {
    let ctx = QualName::new(None, ns!(html), LocalName::from(context));
    let sink = html5ever::parse_fragment(Sink::new(), Default::default(), ctx, Vec::new()).one(html);
    let Some(html_root) = sink.nodes[0]
        .children
        .iter()
        .copied()
        .find(|&c| matches!(sink.nodes[c].data, SinkData::Element(_)))
    else {
        return Vec::new();
    };
    let mut conv = Converter::new(&sink);
    let children = sink.nodes[html_root].children.clone();
    children.into_iter().flat_map(|c| conv.convert(c)).collect()
}

#[derive(Debug)]
enum SinkData {
    Document,
    Element(Vec<(String, String)>),
    Text(String),
    Comment(String),
    Ignored,
}

#[derive(Debug)]
struct SinkNode {
    name: Option<QualName>,
    data: SinkData,
    parent: Option<usize>,
    children: Vec<usize>,
}

struct Sink {
    nodes: Vec<SinkNode>,
}

impl Sink {
    fn new() -> Self {
        Sink {
            nodes: vec![SinkNode {
                name: None,
                data: SinkData::Document,
                parent: None,
                children: Vec::new(),
            }],
        }
    }

    fn push(&mut self, name: Option<QualName>, data: SinkData) -> usize {
        self.nodes.push(SinkNode {
            name,
            data,
            parent: None,
            children: Vec::new(),
        });
        self.nodes.len() - 1
    }

    fn detach(&mut self, node: usize) {
        if let Some(p) = self.nodes[node].parent.take() {
            self.nodes[p].children.retain(|&c| c != node);
        }
    }

    fn insert_at(&mut self, parent: usize, idx: usize, node: usize) {
        self.detach(node);
        self.nodes[parent].children.insert(idx, node);
        self.nodes[node].parent = Some(parent);
    }

    fn insert_text(&mut self, parent: usize, idx: usize, text: &str) {
        if idx > 0 {
            let prev = self.nodes[parent].children[idx - 1];
            if let SinkData::Text(t) = &mut self.nodes[prev].data {
                t.push_str(text);
                return;
            }
        }
        let node = self.push(None, SinkData::Text(text.to_string()));
        self.insert_at(parent, idx, node);
    }
}

fn attr_name(name: &QualName) -> String {
    match &name.prefix {
        Some(p) if !p.is_empty() => format!("{}:{}", p, name.local).to_ascii_lowercase(),
        _ => name.local.to_ascii_lowercase().to_string(),
    }
}

fn convert_attrs(attrs: Vec<Attribute>) -> Vec<(String, String)> {
    attrs
        .into_iter()
        .map(|a| (attr_name(&a.name), a.value.to_string()))
        .collect()
}

impl TreeSink for Sink {
    type Handle = usize;
    type Output = Self;

    fn finish(self) -> Self {
        self
    }

    fn parse_error(&mut self, _msg: Cow<'static, str>) {}

    fn get_document(&mut self) -> usize {
        0
    }

    fn elem_name<'a>(&'a self, target: &'a usize) -> ExpandedName<'a> {
        self.nodes[*target]
            .name
            .as_ref()
            .expect("not an element")
            .expanded()
    }

    fn create_element(&mut self, name: QualName, attrs: Vec<Attribute>, _flags: ElementFlags) -> usize {
        let attrs = convert_attrs(attrs);
        self.push(Some(name), SinkData::Element(attrs))
    }

    fn create_comment(&mut self, text: StrTendril) -> usize {
        self.push(None, SinkData::Comment(text.to_string()))
    }

    fn create_pi(&mut self, _target: StrTendril, _data: StrTendril) -> usize {
        self.push(None, SinkData::Ignored)
    }

    fn append(&mut self, parent: &usize, child: NodeOrText<usize>) {
        let idx = self.nodes[*parent].children.len();
        match child {
            NodeOrText::AppendNode(n) => self.insert_at(*parent, idx, n),
            NodeOrText::AppendText(t) => self.insert_text(*parent, idx, &t),
        }
    }

    fn append_based_on_parent_node(&mut self, element: &usize, prev_element: &usize, child: NodeOrText<usize>) {
        if self.nodes[*element].parent.is_some() {
            self.append_before_sibling(element, child);
        } else {
            self.append(prev_element, child);
        }
    }

    fn append_doctype_to_document(&mut self, _name: StrTendril, _public_id: StrTendril, _system_id: StrTendril) {}

    fn get_template_contents(&mut self, target: &usize) -> usize {
        *target
    }

    fn same_node(&self, x: &usize, y: &usize) -> bool {
        x == y
    }

    fn set_quirks_mode(&mut self, _mode: QuirksMode) {}

    fn append_before_sibling(&mut self, sibling: &usize, new_node: NodeOrText<usize>) {
        let Some(parent) = self.nodes[*sibling].parent else {
            return;
        };
        let idx = self.nodes[parent]
            .children
            .iter()
            .position(|c| c == sibling)
            .expect("sibling under parent");
        match new_node {
            NodeOrText::AppendNode(n) => {
                self.detach(n);
                let idx = self.nodes[parent]
                    .children
                    .iter()
                    .position(|c| c == sibling)
                    .unwrap_or(idx);
                self.insert_at(parent, idx, n);
            }
            NodeOrText::AppendText(t) => self.insert_text(parent, idx, &t),
        }
    }

    fn add_attrs_if_missing(&mut self, target: &usize, attrs: Vec<Attribute>) {
        if let SinkData::Element(existing) = &mut self.nodes[*target].data {
            for (n, v) in convert_attrs(attrs) {
                if !existing.iter().any(|(e, _)| *e == n) {
                    existing.push((n, v));
                }
            }
        }
    }

    fn remove_from_parent(&mut self, target: &usize) {
        self.detach(*target);
    }

    fn reparent_children(&mut self, node: &usize, new_parent: &usize) {
        let children = std::mem::take(&mut self.nodes[*node].children);
        for c in children {
            self.nodes[c].parent = None;
            let idx = self.nodes[*new_parent].children.len();
            self.insert_at(*new_parent, idx, c);
        }
    }
}

/// One entry of a `data-vs-text` list.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ChildEntry {
    Element,
    Text(NodeId, usize),
    Comment(NodeId),
}

/// Format: one space-separated entry per child; `*` for elements,
/// `<id>:<chars>` for text, `!<id>` for comments.
pub(crate) fn parse_child_entries(list: &str) -> Option<Vec<ChildEntry>> {
    list.split_ascii_whitespace()
        .map(|tok| {
            if tok == "*" {
                Some(ChildEntry::Element)
            } else if let Some(id) = tok.strip_prefix('!') {
                NodeId::is_valid_token(id).then(|| ChildEntry::Comment(NodeId::new(id)))
            } else {
                let (id, len) = tok.rsplit_once(':')?;
                let len = len.parse().ok()?;
                NodeId::is_valid_token(id).then(|| ChildEntry::Text(NodeId::new(id), len))
            }
        })
        .collect()
}

struct Converter<'a> {
    sink: &'a Sink,
    seen: HashSet<NodeId>,
}

impl<'a> Converter<'a> {
    fn new(sink: &'a Sink) -> Self {
        Converter {
            sink,
            seen: HashSet::new(),
        }
    }

    fn adopt(&mut self, token: &NodeId) -> Option<NodeId> {
        (NodeId::is_valid_token(token.as_str()) && self.seen.insert(token.clone())).then(|| token.clone())
    }

    fn convert(&mut self, idx: usize) -> Vec<Fragment> {
        let node = &self.sink.nodes[idx];
        match &node.data {
            SinkData::Element(raw) => vec![self.convert_element(idx, raw)],
            SinkData::Text(t) => vec![Fragment::text(t.clone())],
            SinkData::Comment(t) => vec![Fragment::comment(t.clone())],
            SinkData::Document | SinkData::Ignored => Vec::new(),
        }
    }

    fn convert_element(&mut self, idx: usize, raw: &[(String, String)]) -> Fragment {
        let node = &self.sink.nodes[idx];
        let tag = node
            .name
            .as_ref()
            .map(|n| n.local.to_ascii_lowercase().to_string())
            .unwrap_or_default();
        let mut attributes: Attributes = raw.iter().cloned().collect();
        let entries = attributes
            .remove(TEXT_IDENTITY_ATTR)
            .and_then(|l| parse_child_entries(&l));
        let id = match attributes.get(IDENTITY_ATTR).map(NodeId::new) {
            Some(token) => {
                let adopted = self.adopt(&token);
                if adopted.is_none() {
                    attributes.remove(IDENTITY_ATTR);
                }
                adopted
            }
            None => None,
        };
        let children = self.convert_children(&node.children, entries);
        Fragment {
            id,
            data: NodeData::Element(super::Element { tag, attributes }),
            children,
        }
    }

    fn convert_children(&mut self, children: &[usize], entries: Option<Vec<ChildEntry>>) -> Vec<Fragment> {
        let mut out = Vec::new();
        let mut entries = entries.map(|e| e.into_iter().peekable());
        for &c in children {
            if let Some(it) = entries.as_mut() {
                flush_empty_texts(it, &mut out, self);
            }
            let child = &self.sink.nodes[c];
            match (&child.data, entries.as_mut()) {
                (SinkData::Ignored | SinkData::Document, _) => {}
                (SinkData::Element(_), Some(it)) => {
                    if it.next_if(|e| *e == ChildEntry::Element).is_none() {
                        entries = None;
                    }
                    out.extend(self.convert(c));
                }
                (SinkData::Comment(t), Some(it)) => {
                    let mut frag = Fragment::comment(t.clone());
                    match it.peek() {
                        Some(ChildEntry::Comment(id)) => {
                            let id = id.clone();
                            it.next();
                            frag.id = self.adopt(&id);
                        }
                        _ => entries = None,
                    }
                    out.push(frag);
                }
                (SinkData::Text(t), Some(it)) => match split_text(t, it, self) {
                    Some(pieces) => out.extend(pieces),
                    None => {
                        entries = None;
                        out.push(Fragment::text(t.clone()));
                    }
                },
                (_, None) => out.extend(self.convert(c)),
            }
        }
        if let Some(it) = entries.as_mut() {
            flush_empty_texts(it, &mut out, self);
        }
        out
    }
}

fn flush_empty_texts<I: Iterator<Item = ChildEntry>>(
    it: &mut std::iter::Peekable<I>,
    out: &mut Vec<Fragment>,
    conv: &mut Converter<'_>,
) {
    while let Some(ChildEntry::Text(id, 0)) = it.peek() {
        let id = id.clone();
        it.next();
        let mut frag = Fragment::text("");
        frag.id = conv.adopt(&id);
        out.push(frag);
    }
}

/// Splits one parsed text run back into the text nodes listed in `it`.
fn split_text<I: Iterator<Item = ChildEntry>>(
    text: &str,
    it: &mut std::iter::Peekable<I>,
    conv: &mut Converter<'_>,
) -> Option<Vec<Fragment>> {
    let mut pieces = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let (id, len) = match it.peek() {
            Some(ChildEntry::Text(id, len)) => (id.clone(), *len),
            _ => return None,
        };
        it.next();
        let byte_end = rest.char_indices().nth(len).map(|(i, _)| i).unwrap_or(rest.len());
        if rest[..byte_end].chars().count() != len {
            return None;
        }
        let mut frag = Fragment::text(&rest[..byte_end]);
        frag.id = conv.adopt(&id);
        pieces.push(frag);
        rest = &rest[byte_end..];
        if !rest.is_empty() {
            while let Some(ChildEntry::Text(id, 0)) = it.peek() {
                let id = id.clone();
                it.next();
                let mut frag = Fragment::text("");
                frag.id = conv.adopt(&id);
                pieces.push(frag);
            }
        }
    }
    Some(pieces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(doc: &DomDocument, id: &NodeId) -> String {
        let node = doc.node(id).unwrap();
        match &node.data {
            NodeData::Element(e) => {
                let inner: Vec<String> = node.children().iter().map(|c| shape(doc, c)).collect();
                format!("{}({})", e.tag, inner.join(","))
            }
            NodeData::Text(t) => format!("{t:?}"),
            NodeData::Comment(t) => format!("<!{t}>"),
        }
    }

    #[test]
    fn simple_document_structure() {
        let doc = parse_html(b"<html><body><p>hi</p></body></html>", None).unwrap();
        assert_eq!(shape(&doc, doc.root()), r#"html(head(),body(p("hi")))"#);
        let body = doc.body().unwrap();
        // body, p and the text node sit beneath the root alongside head
        assert_eq!(doc.descendants(doc.root()).len() - 1, 4);
        assert_eq!(doc.children(&body).len(), 1);
        doc.validate().unwrap();
    }

    #[test]
    fn unclosed_paragraphs_become_siblings() {
        let doc = parse_html(b"<p>a<p>b", None).unwrap();
        assert_eq!(shape(&doc, doc.root()), r#"html(head(),body(p("a"),p("b")))"#);
    }

    #[test]
    fn empty_input_yields_scaffold() {
        let doc = parse_html(b"", None).unwrap();
        assert_eq!(shape(&doc, doc.root()), "html(head(),body())");
        assert_eq!(doc.len(), 3);
    }

    #[test]
    fn rejects_invalid_utf8() {
        let err = parse_html(b"<p>\xff</p>", None).unwrap_err();
        assert!(matches!(err, ParseError::NotUtf8 { offset: 3 }));
    }

    #[test]
    fn adopts_persisted_identity_and_skips_duplicates() {
        let doc = parse_html(
            br#"<div data-vs-id="40"><span data-vs-id="40">x</span><i data-vs-id="bad id"></i></div>"#,
            None,
        )
        .unwrap();
        let div = NodeId::new("40");
        assert_eq!(doc.tag(&div), Some("div"));
        let kids: Vec<_> = doc.element_children(&div).cloned().collect();
        assert_ne!(kids[0], div);
        assert_eq!(doc.attr(&kids[0], IDENTITY_ATTR), None);
        assert_eq!(doc.attr(&kids[1], IDENTITY_ATTR), None);
        // fresh ids never collide with adopted ones
        assert!(doc.elements().iter().all(|e| e.as_str() != "40" || *e == div));
        doc.validate().unwrap();
    }

    #[test]
    fn child_entry_list_parses() {
        let e = parse_child_entries("* 12:5 !13 14:0").unwrap();
        assert_eq!(
            e,
            vec![
                ChildEntry::Element,
                ChildEntry::Text(NodeId::new("12"), 5),
                ChildEntry::Comment(NodeId::new("13")),
                ChildEntry::Text(NodeId::new("14"), 0),
            ]
        );
        assert!(parse_child_entries("12").is_none());
    }

    #[test]
    fn fragment_parse_in_context() {
        let frags = parse_fragment(r#"<span data-vs-id="9">a</span>tail"#, "p");
        assert_eq!(frags.len(), 2);
        assert_eq!(frags[0].id, Some(NodeId::new("9")));
        assert_eq!(frags[1].data, NodeData::Text("tail".into()));
    }
}
