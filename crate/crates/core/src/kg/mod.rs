//! In-memory triple store, the `.kgt` text format, bundled graphs and view
//! extraction.

mod bundled;
mod view;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use indexmap::IndexSet;

use crate::error::{CoreError, Result};

pub use bundled::{build_cifar_gkg, build_synthetic_gkg, CIFAR_CLASSES};
pub use view::{extract_view, Selection, ViewName, ViewSpec, ViewSubgraph, FUNCTIONAL_PREDICATES, VISUAL_PREDICATES};

/// Relation used for taxonomy edges.
pub const TYPE: &str = "type";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TermKind {
    Class,
    Individual,
    Property,
}

impl TermKind {
    fn tag(self) -> char {
        match self {
            TermKind::Class => 'C',
            TermKind::Individual => 'I',
            TermKind::Property => 'P',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Term {
    pub kind: TermKind,
    pub id: String,
}

impl Term {
    pub fn class(id: impl Into<String>) -> Self {
        Self {
            kind: TermKind::Class,
            id: id.into(),
        }
    }

    pub fn individual(id: impl Into<String>) -> Self {
        Self {
            kind: TermKind::Individual,
            id: id.into(),
        }
    }

    pub fn property(id: impl Into<String>) -> Self {
        Self {
            kind: TermKind::Property,
            id: id.into(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.tag(), self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: Term,
    pub relation: Term,
    pub tail: Term,
}

impl Triple {
    /// Build a triple, checking the kind rules and identifier syntax.
    pub fn new(head: Term, relation: impl Into<String>, tail: Term) -> Result<Self> {
        let relation = Term::property(relation);
        for t in [&head, &relation, &tail] {
            check_id(&t.id).map_err(CoreError::Graph)?;
        }
        if head.kind == TermKind::Property || tail.kind == TermKind::Property {
            return Err(CoreError::Graph(format!(
                "properties cannot be triple endpoints: {head} {} {tail}",
                relation.id
            )));
        }
        Ok(Self { head, relation, tail })
    }

    pub fn relation_id(&self) -> &str {
        &self.relation.id
    }
}

fn check_id(id: &str) -> std::result::Result<(), String> {
    if id.is_empty() {
        return Err("empty identifier".into());
    }
    if id.chars().any(char::is_whitespace) {
        return Err(format!("identifier {id:?} contains whitespace"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KgStats {
    pub classes: usize,
    pub properties: usize,
    pub individuals: usize,
    pub triples: usize,
}

/// Triple set plus the ordered list of dataset classes.
///
/// Triples keep their insertion order, which makes serialization canonical.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    class_list: Vec<String>,
    triples: IndexSet<Triple>,
}

impl KnowledgeGraph {
    /// Empty graph over the given dataset classes.
    pub fn new(class_list: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &class_list {
            check_id(c).map_err(CoreError::Graph)?;
            if !seen.insert(c.as_str()) {
                return Err(CoreError::Graph(format!("class {c} listed twice")));
            }
        }
        Ok(Self {
            class_list,
            triples: IndexSet::new(),
        })
    }

    /// Insert a triple; returns false when it was already present.
    pub fn insert(&mut self, triple: Triple) -> bool {
        self.triples.insert(triple)
    }

    /// Convenience insert from raw parts.
    pub fn add(&mut self, head: Term, relation: &str, tail: Term) -> Result<bool> {
        Ok(self.insert(Triple::new(head, relation, tail)?))
    }

    pub fn class_list(&self) -> &[String] {
        &self.class_list
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> + '_ {
        self.triples.iter()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.contains(t)
    }

    /// Distinct property ids in order of first use.
    pub fn properties(&self) -> IndexSet<&str> {
        self.triples.iter().map(|t| t.relation_id()).collect()
    }

    fn terms_of_kind(&self, kind: TermKind) -> IndexSet<&str> {
        let mut out: IndexSet<&str> = IndexSet::new();
        if kind == TermKind::Class {
            out.extend(self.class_list.iter().map(String::as_str));
        }
        for t in &self.triples {
            for end in [&t.head, &t.tail] {
                if end.kind == kind {
                    out.insert(&end.id);
                }
            }
        }
        out
    }

    pub fn classes(&self) -> IndexSet<&str> {
        self.terms_of_kind(TermKind::Class)
    }

    pub fn individuals(&self) -> IndexSet<&str> {
        self.terms_of_kind(TermKind::Individual)
    }

    pub fn stats(&self) -> KgStats {
        KgStats {
            classes: self.classes().len(),
            properties: self.properties().len(),
            individuals: self.individuals().len(),
            triples: self.triples.len(),
        }
    }

    /// Every dataset class must be the head of at least one triple.
    pub fn validate(&self) -> Result<()> {
        if self.class_list.is_empty() {
            return Err(CoreError::Graph("no dataset classes declared".into()));
        }
        let heads: HashSet<&Term> = self.triples.iter().map(|t| &t.head).collect();
        for c in &self.class_list {
            if !heads.contains(&Term::class(c.clone())) {
                return Err(CoreError::Graph(format!(
                    "dataset class {c} is not the head of any triple"
                )));
            }
        }
        Ok(())
    }

    /// Canonical `.kgt` text: the class directive followed by one triple per
    /// line in insertion order.
    pub fn to_kgt(&self) -> String {
        let mut out = String::from("@classes");
        for c in &self.class_list {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for t in &self.triples {
            out.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation.id, t.tail));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut classes: Option<Vec<String>> = None;
        let mut pending: Vec<Triple> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            let err = |message: String| CoreError::Parse { line: line_no, message };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("@classes") {
                if classes.is_some() {
                    return Err(err("duplicate @classes directive".into()));
                }
                let names: Vec<String> = rest.split('\t').skip(1).map(str::to_string).collect();
                if !rest.starts_with('\t') || names.is_empty() {
                    return Err(err("@classes needs tab-separated class names".into()));
                }
                for n in &names {
                    check_id(n).map_err(err)?;
                }
                classes = Some(names);
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            let head = parse_term(fields[0]).map_err(err)?;
            let tail = parse_term(fields[2]).map_err(err)?;
            pending.push(Triple::new(head, fields[1], tail).map_err(|e| err(e.to_string()))?);
        }
        let classes = classes.ok_or(CoreError::Parse {
            line: 1,
            message: "missing @classes directive".into(),
        })?;
        let mut g = KnowledgeGraph::new(classes)?;
        for t in pending {
            g.insert(t);
        }
        g.validate()?;
        Ok(g)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_kgt())?;
        Ok(())
    }
}

fn parse_term(field: &str) -> std::result::Result<Term, String> {
    let (tag, id) = field
        .split_once(':')
        .ok_or_else(|| format!("term {field:?} lacks a kind tag"))?;
    check_id(id)?;
    match tag {
        "C" => Ok(Term::class(id)),
        "I" => Ok(Term::individual(id)),
        other => Err(format!("unknown kind tag {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_starts_with_directive() {
        let mut g = KnowledgeGraph::new(vec!["Horse".into()]).unwrap();
        g.add(Term::class("Horse"), "hasColor", Term::individual("brown"))
            .unwrap();
        assert_eq!(g.to_kgt(), "@classes\tHorse\nC:Horse\thasColor\tI:brown\n");
    }

    #[test]
    fn property_endpoint_rejected() {
        assert!(Triple::new(Term::property("p"), "q", Term::class("A")).is_err());
    }
}
