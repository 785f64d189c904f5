use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use ctxf_autodiff::Tensor;

use super::{KnowledgeGraph, Term, TermKind, Triple, TYPE};
use crate::error::{CoreError, Result};

pub const VISUAL_PREDICATES: [&str; 6] = [
    "hasBackground",
    "hasColor",
    "hasPart",
    "hasShape",
    "hasSize",
    "hasTexture",
];
pub const FUNCTIONAL_PREDICATES: [&str; 4] = ["hasMovement", "hasSound", "hasSpeed", "hasWeight"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViewName {
    Visual,
    Taxonomical,
    Functional,
    Full,
}

impl ViewName {
    pub const ALL: [ViewName; 4] = [
        ViewName::Visual,
        ViewName::Taxonomical,
        ViewName::Functional,
        ViewName::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewName::Visual => "visual",
            ViewName::Taxonomical => "taxonomical",
            ViewName::Functional => "functional",
            ViewName::Full => "full",
        }
    }
}

impl fmt::Display for ViewName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewName {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        ViewName::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown view {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selection {
    All,
    Predicates(BTreeSet<String>),
}

/// Named predicate filter, optionally followed by transitive type chains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSpec {
    pub name: String,
    pub selection: Selection,
    pub include_type_closure: bool,
}

impl ViewSpec {
    pub fn standard(view: ViewName) -> Self {
        let preds = |ps: &[&str]| Selection::Predicates(ps.iter().map(|p| p.to_string()).collect());
        let (selection, include_type_closure) = match view {
            ViewName::Visual => (preds(&VISUAL_PREDICATES), false),
            ViewName::Taxonomical => (preds(&[TYPE]), true),
            ViewName::Functional => (preds(&FUNCTIONAL_PREDICATES), false),
            ViewName::Full => (Selection::All, false),
        };
        Self {
            name: view.as_str().to_string(),
            selection,
            include_type_closure,
        }
    }

    /// A custom predicate filter; the predicate set must be nonempty.
    pub fn custom(
        name: impl Into<String>,
        predicates: impl IntoIterator<Item = String>,
        include_type_closure: bool,
    ) -> Result<Self> {
        let name = name.into();
        let predicates: BTreeSet<String> = predicates.into_iter().collect();
        if predicates.is_empty() {
            return Err(CoreError::View {
                view: name,
                message: "empty predicate set".into(),
            });
        }
        Ok(Self {
            name,
            selection: Selection::Predicates(predicates),
            include_type_closure,
        })
    }

    fn selects(&self, relation: &str) -> bool {
        match &self.selection {
            Selection::All => true,
            Selection::Predicates(p) => p.contains(relation),
        }
    }
}

/// Subgraph selected by a view. Dataset classes always occupy the first
/// node indices, in class-list order.
#[derive(Clone, Debug)]
pub struct ViewSubgraph {
    pub view: String,
    class_list: Vec<String>,
    triples: Vec<Triple>,
    nodes: Vec<Term>,
    index: HashMap<Term, usize>,
}

pub fn extract_view(g: &KnowledgeGraph, spec: &ViewSpec) -> Result<ViewSubgraph> {
    let mut keep: Vec<bool> = g.triples().map(|t| spec.selects(t.relation_id())).collect();
    if !keep.iter().any(|&k| k) {
        return Err(CoreError::View {
            view: spec.name.clone(),
            message: "no triples match the view predicates".into(),
        });
    }
    if spec.include_type_closure {
        let triples: Vec<&Triple> = g.triples().collect();
        let mut by_head: HashMap<&Term, Vec<usize>> = HashMap::new();
        for (i, t) in triples.iter().enumerate() {
            if t.relation_id() == TYPE {
                by_head.entry(&t.head).or_default().push(i);
            }
        }
        let class_terms: Vec<Term> = g.class_list().iter().map(|c| Term::class(c.clone())).collect();
        let mut seen: HashSet<&Term> = HashSet::new();
        let mut queue: VecDeque<&Term> = VecDeque::new();
        let starts = class_terms.iter().chain(
            triples
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .flat_map(|(t, _)| [&t.head, &t.tail]),
        );
        for t in starts {
            if seen.insert(t) {
                queue.push_back(t);
            }
        }
        while let Some(t) = queue.pop_front() {
            for &i in by_head.get(t).map(Vec::as_slice).unwrap_or(&[]) {
                keep[i] = true;
                let tail = &triples[i].tail;
                if seen.insert(tail) {
                    queue.push_back(tail);
                }
            }
        }
    }

    let triples: Vec<Triple> = g
        .triples()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t.clone())
        .collect();
    let mut nodes: Vec<Term> = g.class_list().iter().map(|c| Term::class(c.clone())).collect();
    let mut index: HashMap<Term, usize> = nodes.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    for t in &triples {
        for end in [&t.head, &t.tail] {
            if !index.contains_key(end) {
                index.insert(end.clone(), nodes.len());
                nodes.push(end.clone());
            }
        }
    }
    Ok(ViewSubgraph {
        view: spec.name.clone(),
        class_list: g.class_list().to_vec(),
        triples,
        nodes,
        index,
    })
}

impl ViewSubgraph {
    pub fn class_list(&self) -> &[String] {
        &self.class_list
    }

    pub fn n_classes(&self) -> usize {
        self.class_list.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn nodes(&self) -> &[Term] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self) -> &HashMap<Term, usize> {
        &self.index
    }

    pub fn index_of(&self, t: &Term) -> Option<usize> {
        self.index.get(t).copied()
    }

    /// Undirected edges between distinct nodes, each listed once as (lo, hi).
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        self.triples
            .iter()
            .filter_map(|t| {
                let (a, b) = (self.index[&t.head], self.index[&t.tail]);
                (a != b).then(|| (a.min(b), a.max(b)))
            })
            .collect()
    }

    /// Neighbor sets of every node, ignoring direction and relation type.
    pub fn neighbors(&self) -> Vec<BTreeSet<usize>> {
        let mut out = vec![BTreeSet::new(); self.nodes.len()];
        for (a, b) in self.edges() {
            out[a].insert(b);
            out[b].insert(a);
        }
        out
    }

    /// Symmetric 0/1 adjacency with zero diagonal.
    pub fn adjacency(&self) -> Tensor {
        let n = self.nodes.len();
        let mut a = Tensor::zeros(&[n, n]);
        for (i, j) in self.edges() {
            a.data_mut()[i * n + j] = 1.0;
            a.data_mut()[j * n + i] = 1.0;
        }
        a
    }

    /// One-hot node features.
    pub fn features(&self) -> Tensor {
        Tensor::identity(self.nodes.len())
    }

    pub fn to_adjacency(&self) -> (Tensor, Tensor, &HashMap<Term, usize>) {
        (self.adjacency(), self.features(), &self.index)
    }

    /// The view as a standalone graph over the same dataset classes.
    pub fn to_graph(&self) -> Result<KnowledgeGraph> {
        let mut g = KnowledgeGraph::new(self.class_list.clone())?;
        for t in &self.triples {
            g.insert(t.clone());
        }
        Ok(g)
    }

    /// Nodes that are not dataset classes and carry the given kind.
    pub fn count_kind(&self, kind: TermKind) -> usize {
        self.nodes[self.class_list.len()..]
            .iter()
            .filter(|t| t.kind == kind)
            .count()
    }
}
