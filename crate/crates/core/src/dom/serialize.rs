//! HTML serialization.

use std::fmt::Write;

use super::{DomDocument, NodeData, NodeId, IDENTITY_ATTR, TEXT_IDENTITY_ATTR};

const VOID_ELEMENTS: &[&str] = &[
    "area", "base", "basefont", "bgsound", "br", "col", "embed", "frame", "hr", "img", "input",
    "keygen", "link", "meta", "param", "source", "track", "wbr",
];

const RAW_TEXT_ELEMENTS: &[&str] = &[
    "style", "script", "xmp", "iframe", "noembed", "noframes", "plaintext", "noscript",
];

pub fn is_void(tag: &str) -> bool {
    VOID_ELEMENTS.contains(&tag)
}

/// Serializes the whole document. With `include_identity`, every element
/// carries `data-vs-id`, and elements with text or comment children carry
/// `data-vs-text`, so that reparsing restores every identity.
pub fn serialize_html(doc: &DomDocument, include_identity: bool) -> String {
    let mut out = String::from("<!DOCTYPE html>");
    Writer { doc, include_identity, out: &mut out }.node(doc.root());
    out
}

/// Serializes one subtree. Text is escaped according to its parent's context.
pub fn serialize_node(doc: &DomDocument, id: &NodeId, include_identity: bool) -> String {
    let mut out = String::new();
    Writer { doc, include_identity, out: &mut out }.node(id);
    out
}

struct Writer<'a> {
    doc: &'a DomDocument,
    include_identity: bool,
    out: &'a mut String,
}

impl Writer<'_> {
    fn node(&mut self, id: &NodeId) {
        let Some(node) = self.doc.node(id) else {
            return;
        };
        match &node.data {
            NodeData::Element(e) => {
                self.out.push('<');
                self.out.push_str(&e.tag);
                let mut wrote_identity = false;
                for (name, value) in e.attributes.iter() {
                    if name == TEXT_IDENTITY_ATTR {
                        continue;
                    }
                    if name == IDENTITY_ATTR {
                        if self.include_identity {
                            self.attr(name, id.as_str());
                            wrote_identity = true;
                        }
                        continue;
                    }
                    self.attr(name, value);
                }
                if self.include_identity {
                    if !wrote_identity {
                        self.attr(IDENTITY_ATTR, id.as_str());
                    }
                    if let Some(list) = self.child_entries(id) {
                        self.attr(TEXT_IDENTITY_ATTR, &list);
                    }
                }
                self.out.push('>');
                if is_void(&e.tag) && node.children().is_empty() {
                    return;
                }
                if matches!(e.tag.as_str(), "pre" | "textarea" | "listing") {
                    if let Some(first) = node.children().first() {
                        if matches!(self.doc.node(first).map(|n| &n.data), Some(NodeData::Text(t)) if t.starts_with('\n'))
                        {
                            self.out.push('\n');
                        }
                    }
                }
                for c in node.children() {
                    self.node(c);
                }
                let _ = write!(self.out, "</{}>", e.tag);
            }
            NodeData::Text(t) => {
                let raw = self
                    .doc
                    .parent(id)
                    .and_then(|p| self.doc.tag(p))
                    .is_some_and(|tag| RAW_TEXT_ELEMENTS.contains(&tag));
                if raw {
                    self.out.push_str(t);
                } else {
                    escape_text(t, self.out);
                }
            }
            NodeData::Comment(t) => {
                let _ = write!(self.out, "<!--{t}-->");
            }
        }
    }

    fn attr(&mut self, name: &str, value: &str) {
        let _ = write!(self.out, " {name}=\"");
        escape_attr(value, self.out);
        self.out.push('"');
    }

    fn child_entries(&self, id: &NodeId) -> Option<String> {
        let children = self.doc.children(id);
        let mut has_text = false;
        let entries: Vec<String> = children
            .iter()
            .map(|c| match self.doc.node(c).map(|n| &n.data) {
                Some(NodeData::Text(t)) => {
                    has_text = true;
                    format!("{c}:{}", t.chars().count())
                }
                Some(NodeData::Comment(_)) => {
                    has_text = true;
                    format!("!{c}")
                }
                _ => "*".to_string(),
            })
            .collect();
        has_text.then(|| entries.join(" "))
    }
}

fn escape_text(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '\u{a0}' => out.push_str("&nbsp;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
}

fn escape_attr(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            '\u{a0}' => out.push_str("&nbsp;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
}
