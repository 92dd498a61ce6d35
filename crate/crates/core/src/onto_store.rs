//! Ontology ingestion, merging and adjacency indexing.
//!
//! Ontologies arrive in a small line-oriented exchange format (or its
//! one-JSON-object-per-line twin) and are frozen into an [`OntologyGraph`]:
//! concepts, labelled edges, axioms, and a CUI lookup. The graph never
//! changes after construction; [`merge_graphs`] builds a new one.
//!
//! Exchange format, one record per line, whitespace-delimited:
//!
//! ```text
//! C <id> <cui-or-"-"> <preferred label...>
//! L <id> <alternative label...>
//! E <subject-id> <predicate-label> <object-id>
//! A <kind> <subject-id> <property-label-or-"-"> <object-id>
//! ```
//!
//! with `kind` one of `sub`, `equiv`, `some`, `only`, `and`, `or`. Lines
//! starting with `#` are comments.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Label emitted when a subclass axiom is walked from the subclass.
pub const SUBCLASS_OF: &str = "subClassOf";
/// Label emitted when a subclass axiom is walked from the superclass.
pub const SUPERCLASS_OF: &str = "superClassOf";
pub const EQUIVALENT_TO: &str = "equivalentTo";
pub const MEMBER_OF_INTERSECTION: &str = "memberOf⊓";
pub const MEMBER_OF_UNION: &str = "memberOf⊔";
/// Suffix carried by any label traversed against its stored direction.
pub const INVERSE_MARKER: &str = "^-1";

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate concept id `{id}`")]
    DuplicateConcept { line: usize, id: String },
    #[error("line {line}: reference to undeclared concept `{id}`")]
    DanglingReference { line: usize, id: String },
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("unknown ontology format `{0}` (expected `triples` or `axiom-json`)")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = OntologyError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub preferred_label: String,
    pub cui: Option<String>,
    pub source_ontology: String,
    /// Labels picked up from other ontologies during CUI unification.
    #[serde(default)]
    pub alt_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AxiomKind {
    SubClassOf,
    EquivalentTo,
    ExistentialRestriction,
    UniversalRestriction,
    IntersectionMember,
    UnionMember,
}

impl AxiomKind {
    pub fn is_restriction(self) -> bool {
        matches!(
            self,
            AxiomKind::ExistentialRestriction | AxiomKind::UniversalRestriction
        )
    }

    /// Keyword used in the exchange format.
    pub fn keyword(self) -> &'static str {
        match self {
            AxiomKind::SubClassOf => "sub",
            AxiomKind::EquivalentTo => "equiv",
            AxiomKind::ExistentialRestriction => "some",
            AxiomKind::UniversalRestriction => "only",
            AxiomKind::IntersectionMember => "and",
            AxiomKind::UnionMember => "or",
        }
    }
}

impl FromStr for AxiomKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "sub" => AxiomKind::SubClassOf,
            "equiv" => AxiomKind::EquivalentTo,
            "some" => AxiomKind::ExistentialRestriction,
            "only" => AxiomKind::UniversalRestriction,
            "and" => AxiomKind::IntersectionMember,
            "or" => AxiomKind::UnionMember,
            other => return Err(format!("unknown axiom kind `{other}`")),
        })
    }
}

/// A logical statement between two named concepts.
///
/// `IntersectionMember`/`UnionMember` read as "subject is one operand of the
/// intersection (union) that defines object".
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Axiom {
    pub kind: AxiomKind,
    pub subject: String,
    pub property: Option<String>,
    pub object: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyStats {
    pub concept_count: usize,
    pub property_count: usize,
    pub max_subclass_depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OntologyFormat {
    Triples,
    AxiomJson,
}

impl FromStr for OntologyFormat {
    type Err = OntologyError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triples" => Ok(OntologyFormat::Triples),
            "axiom-json" | "json" => Ok(OntologyFormat::AxiomJson),
            other => Err(OntologyError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    Out,
    In,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Traversal {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Neighbor {
    pub label: String,
    pub target: String,
    pub traversal: Traversal,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct AxiomStep {
    pub labels: Vec<String>,
    pub target: String,
}

/// One traversable move out of a node, in index space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct RawStep {
    pub labels: Vec<String>,
    pub target: usize,
    pub from_axiom: bool,
}

#[derive(Debug, Clone)]
struct EdgeRec {
    subject: usize,
    predicate: String,
    object: usize,
}

#[derive(Debug, Clone)]
struct AxiomRec {
    kind: AxiomKind,
    subject: usize,
    property: Option<String>,
    object: usize,
}

/// Flip a step label to its inverse reading.
pub fn invert_label(label: &str) -> String {
    match label {
        SUBCLASS_OF => SUPERCLASS_OF.to_string(),
        SUPERCLASS_OF => SUBCLASS_OF.to_string(),
        EQUIVALENT_TO => EQUIVALENT_TO.to_string(),
        _ => match label.strip_suffix(INVERSE_MARKER) {
            Some(base) => base.to_string(),
            None => format!("{label}{INVERSE_MARKER}"),
        },
    }
}

fn forward_axiom_labels(kind: AxiomKind, property: Option<&str>) -> Vec<String> {
    let prop = property.unwrap_or_default();
    match kind {
        AxiomKind::SubClassOf => vec![SUBCLASS_OF.to_string()],
        AxiomKind::EquivalentTo => vec![EQUIVALENT_TO.to_string()],
        AxiomKind::ExistentialRestriction => {
            vec![SUBCLASS_OF.to_string(), format!("some {prop}")]
        }
        AxiomKind::UniversalRestriction => {
            vec![SUBCLASS_OF.to_string(), format!("only {prop}")]
        }
        AxiomKind::IntersectionMember => vec![MEMBER_OF_INTERSECTION.to_string()],
        AxiomKind::UnionMember => vec![MEMBER_OF_UNION.to_string()],
    }
}

/// Reverse the order of a step's labels and invert each one.
pub fn invert_labels(labels: &[String]) -> Vec<String> {
    labels.iter().rev().map(|l| invert_label(l)).collect()
}

/// Immutable, indexed ontology graph.
#[derive(Debug, Clone, Default)]
pub struct OntologyGraph {
    concepts: Vec<Concept>,
    index: HashMap<String, usize>,
    edges: Vec<EdgeRec>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
    axioms: Vec<AxiomRec>,
    axioms_by_subject: Vec<Vec<usize>>,
    axioms_by_object: Vec<Vec<usize>>,
    cui_index: BTreeMap<String, Vec<usize>>,
    stats: OntologyStats,
}

impl OntologyGraph {
    pub fn builder(source: impl Into<String>) -> GraphBuilder {
        GraphBuilder::new(source)
    }

    pub fn stats(&self) -> OntologyStats {
        self.stats
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn concept(&self, id: &str) -> Option<&Concept> {
        self.index.get(id).map(|&i| &self.concepts[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|e| Edge {
            subject: self.concepts[e.subject].id.clone(),
            predicate: e.predicate.clone(),
            object: self.concepts[e.object].id.clone(),
        })
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn axioms(&self) -> impl Iterator<Item = Axiom> + '_ {
        self.axioms.iter().map(|a| Axiom {
            kind: a.kind,
            subject: self.concepts[a.subject].id.clone(),
            property: a.property.clone(),
            object: self.concepts[a.object].id.clone(),
        })
    }

    pub fn axiom_count(&self) -> usize {
        self.axioms.len()
    }

    /// All concept ids carrying `cui`, in declaration order.
    pub fn resolve_cui(&self, cui: &str) -> Vec<String> {
        self.cui_index
            .get(cui)
            .map(|ids| ids.iter().map(|&i| self.concepts[i].id.clone()).collect())
            .unwrap_or_default()
    }

    pub(crate) fn resolve_cui_idx(&self, cui: &str) -> &[usize] {
        self.cui_index.get(cui).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_cui(&self, cui: &str) -> bool {
        self.cui_index.contains_key(cui)
    }

    pub fn cuis(&self) -> impl Iterator<Item = &str> {
        self.cui_index.keys().map(String::as_str)
    }

    pub(crate) fn idx(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| OntologyError::UnknownConcept(id.to_string()))
    }

    pub(crate) fn id_of(&self, idx: usize) -> &str {
        &self.concepts[idx].id
    }

    /// Plain-edge adjacency of `concept`. Inverse traversals carry
    /// [`INVERSE_MARKER`] on the label.
    pub fn neighbors(&self, concept: &str, direction: Direction) -> Result<Vec<Neighbor>> {
        let idx = self.idx(concept)?;
        Ok(self
            .plain_steps(idx, direction)
            .map(|(label, target, traversal)| Neighbor {
                label,
                target: self.concepts[target].id.clone(),
                traversal,
            })
            .collect())
    }

    /// Axiom-derived moves out of `concept`, forward and inverse.
    pub fn axiom_steps(&self, concept: &str) -> Result<Vec<AxiomStep>> {
        let idx = self.idx(concept)?;
        Ok(self
            .axiom_moves(idx)
            .map(|(labels, target)| AxiomStep {
                labels,
                target: self.concepts[target].id.clone(),
            })
            .collect())
    }

    fn plain_steps(
        &self,
        idx: usize,
        direction: Direction,
    ) -> impl Iterator<Item = (String, usize, Traversal)> + '_ {
        let out = matches!(direction, Direction::Out | Direction::Both);
        let inc = matches!(direction, Direction::In | Direction::Both);
        let forward = self.out_edges[idx]
            .iter()
            .filter(move |_| out)
            .map(move |&e| {
                let rec = &self.edges[e];
                (rec.predicate.clone(), rec.object, Traversal::Forward)
            });
        let inverse = self.in_edges[idx]
            .iter()
            .filter(move |_| inc)
            .map(move |&e| {
                let rec = &self.edges[e];
                (invert_label(&rec.predicate), rec.subject, Traversal::Inverse)
            });
        forward.chain(inverse)
    }

    fn axiom_moves(&self, idx: usize) -> impl Iterator<Item = (Vec<String>, usize)> + '_ {
        let forward = self.axioms_by_subject[idx].iter().map(move |&a| {
            let rec = &self.axioms[a];
            (forward_axiom_labels(rec.kind, rec.property.as_deref()), rec.object)
        });
        let inverse = self.axioms_by_object[idx].iter().map(move |&a| {
            let rec = &self.axioms[a];
            let labels = forward_axiom_labels(rec.kind, rec.property.as_deref());
            (invert_labels(&labels), rec.subject)
        });
        forward.chain(inverse)
    }

    /// Every move out of `idx`: plain edges both ways, then axiom steps if
    /// requested.
    pub(crate) fn raw_steps(&self, idx: usize, with_axioms: bool) -> Vec<RawStep> {
        let mut steps: Vec<RawStep> = self
            .plain_steps(idx, Direction::Both)
            .map(|(label, target, _)| RawStep {
                labels: vec![label],
                target,
                from_axiom: false,
            })
            .collect();
        if with_axioms {
            steps.extend(self.axiom_moves(idx).map(|(labels, target)| RawStep {
                labels,
                target,
                from_axiom: true,
            }));
        }
        steps
    }

    /// Unique targets reachable in one move, used for distance pruning.
    pub(crate) fn step_targets(&self, idx: usize, with_axioms: bool) -> impl Iterator<Item = usize> + '_ {
        let plain = self.out_edges[idx]
            .iter()
            .map(move |&e| self.edges[e].object)
            .chain(self.in_edges[idx].iter().map(move |&e| self.edges[e].subject));
        let axioms = self.axioms_by_subject[idx]
            .iter()
            .map(move |&a| self.axioms[a].object)
            .chain(self.axioms_by_object[idx].iter().map(move |&a| self.axioms[a].subject))
            .filter(move |_| with_axioms);
        plain.chain(axioms)
    }

    /// Canonical exchange-format text: concepts by id, then sorted edges and
    /// axioms.
    pub fn to_exchange_format(&self) -> String {
        let mut out = String::new();
        let mut order: Vec<usize> = (0..self.concepts.len()).collect();
        order.sort_by(|&a, &b| self.concepts[a].id.cmp(&self.concepts[b].id));
        for &i in &order {
            let c = &self.concepts[i];
            out.push_str(&format!(
                "C {} {} {}\n",
                c.id,
                c.cui.as_deref().unwrap_or("-"),
                c.preferred_label
            ));
            for alt in &c.alt_labels {
                out.push_str(&format!("L {} {}\n", c.id, alt));
            }
        }
        let edges: BTreeSet<Edge> = self.edges().collect();
        for e in edges {
            out.push_str(&format!("E {} {} {}\n", e.subject, e.predicate, e.object));
        }
        let axioms: BTreeSet<Axiom> = self.axioms().collect();
        for a in axioms {
            out.push_str(&format!(
                "A {} {} {} {}\n",
                a.kind.keyword(),
                a.subject,
                a.property.as_deref().unwrap_or("-"),
                a.object
            ));
        }
        out
    }

    /// SHA-256 over the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_exchange_format().as_bytes()))
    }

    fn compute_stats(&mut self) {
        let mut properties: BTreeSet<&str> =
            self.edges.iter().map(|e| e.predicate.as_str()).collect();
        properties.extend(self.axioms.iter().filter_map(|a| a.property.as_deref()));
        let property_count = properties.len();
        let max_subclass_depth = self.max_subclass_depth();
        self.stats = OntologyStats {
            concept_count: self.concepts.len(),
            property_count,
            max_subclass_depth,
        };
    }

    /// Longest chain of `sub` axioms, child to parent. Edges closing a cycle
    /// on the current DFS stack are ignored.
    fn max_subclass_depth(&self) -> usize {
        let n = self.concepts.len();
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
        for a in &self.axioms {
            if a.kind == AxiomKind::SubClassOf && a.subject != a.object {
                parents[a.subject].push(a.object);
            }
        }
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        let mut depth = vec![0usize; n];
        let mut best = 0;
        for root in 0..n {
            if state[root] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
            state[root] = 1;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if *next < parents[node].len() {
                    let p = parents[node][*next];
                    *next += 1;
                    if state[p] == 0 {
                        state[p] = 1;
                        stack.push((p, 0));
                    }
                } else {
                    let d = parents[node]
                        .iter()
                        .filter(|&&p| state[p] == 2)
                        .map(|&p| depth[p] + 1)
                        .max()
                        .unwrap_or(0);
                    depth[node] = d;
                    best = best.max(d);
                    state[node] = 2;
                    stack.pop();
                }
            }
        }
        best
    }
}

impl fmt::Display for OntologyStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "concepts={} properties={} max_subclass_depth={}",
            self.concept_count, self.property_count, self.max_subclass_depth
        )
    }
}

/// Collects records, then validates references and freezes the graph.
#[derive(Debug)]
pub struct GraphBuilder {
    source: String,
    concepts: Vec<Concept>,
    index: HashMap<String, usize>,
    edges: Vec<(usize, Edge)>,
    axioms: Vec<(usize, Axiom)>,
    alt_labels: Vec<(usize, String, String)>,
    records: usize,
}

impl GraphBuilder {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            concepts: Vec::new(),
            index: HashMap::new(),
            edges: Vec::new(),
            axioms: Vec::new(),
            alt_labels: Vec::new(),
            records: 0,
        }
    }

    fn next_line(&mut self) -> usize {
        self.records += 1;
        self.records
    }

    pub fn concept(&mut self, id: &str, cui: Option<&str>, label: &str) -> Result<&mut Self> {
        let line = self.next_line();
        self.concept_at(line, id, cui, label)?;
        Ok(self)
    }

    pub fn edge(&mut self, subject: &str, predicate: &str, object: &str) -> &mut Self {
        let line = self.next_line();
        self.edges.push((
            line,
            Edge {
                subject: subject.to_string(),
                predicate: predicate.to_string(),
                object: object.to_string(),
            },
        ));
        self
    }

    pub fn axiom(
        &mut self,
        kind: AxiomKind,
        subject: &str,
        property: Option<&str>,
        object: &str,
    ) -> Result<&mut Self> {
        let line = self.next_line();
        self.axiom_at(
            line,
            Axiom {
                kind,
                subject: subject.to_string(),
                property: property.map(str::to_string),
                object: object.to_string(),
            },
        )?;
        Ok(self)
    }

    pub(crate) fn concept_at(
        &mut self,
        line: usize,
        id: &str,
        cui: Option<&str>,
        label: &str,
    ) -> Result<()> {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(malformed(line, format!("invalid concept id `{id}`")));
        }
        if label.trim().is_empty() {
            return Err(malformed(line, format!("concept `{id}` has an empty label")));
        }
        if matches!(cui, Some(c) if c.is_empty()) {
            return Err(malformed(line, format!("concept `{id}` has an empty CUI")));
        }
        if self.index.contains_key(id) {
            return Err(OntologyError::DuplicateConcept {
                line,
                id: id.to_string(),
            });
        }
        self.index.insert(id.to_string(), self.concepts.len());
        self.concepts.push(Concept {
            id: id.to_string(),
            preferred_label: label.trim().to_string(),
            cui: cui.map(str::to_string),
            source_ontology: self.source.clone(),
            alt_labels: Vec::new(),
        });
        Ok(())
    }

    pub(crate) fn axiom_at(&mut self, line: usize, axiom: Axiom) -> Result<()> {
        match (&axiom.property, axiom.kind.is_restriction()) {
            (None, true) => {
                return Err(malformed(
                    line,
                    format!("`{}` axiom needs a property label", axiom.kind.keyword()),
                ))
            }
            (Some(p), true) if p.is_empty() => {
                return Err(malformed(line, "empty property label".to_string()))
            }
            (Some(_), false) => {
                return Err(malformed(
                    line,
                    format!("`{}` axiom takes no property label", axiom.kind.keyword()),
                ))
            }
            _ => {}
        }
        self.axioms.push((line, axiom));
        Ok(())
    }

    pub fn alt_label(&mut self, id: &str, label: &str) -> &mut Self {
        let line = self.next_line();
        self.alt_labels.push((line, id.to_string(), label.trim().to_string()));
        self
    }

    fn lookup(&self, line: usize, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| OntologyError::DanglingReference {
                line,
                id: id.to_string(),
            })
    }

    pub fn build(self) -> Result<OntologyGraph> {
        let n = self.concepts.len();
        let mut graph = OntologyGraph {
            out_edges: vec![Vec::new(); n],
            in_edges: vec![Vec::new(); n],
            axioms_by_subject: vec![Vec::new(); n],
            axioms_by_object: vec![Vec::new(); n],
            ..OntologyGraph::default()
        };
        let mut concepts = self.concepts.clone();
        for (line, id, label) in &self.alt_labels {
            let i = self.lookup(*line, id)?;
            if !concepts[i].alt_labels.contains(label) && concepts[i].preferred_label != *label {
                concepts[i].alt_labels.push(label.clone());
            }
        }
        let mut seen_edges = BTreeSet::new();
        for (line, e) in &self.edges {
            let s = self.lookup(*line, &e.subject)?;
            let o = self.lookup(*line, &e.object)?;
            if !seen_edges.insert((s, e.predicate.clone(), o)) {
                continue;
            }
            let ei = graph.edges.len();
            graph.edges.push(EdgeRec {
                subject: s,
                predicate: e.predicate.clone(),
                object: o,
            });
            graph.out_edges[s].push(ei);
            graph.in_edges[o].push(ei);
        }
        let mut seen_axioms = BTreeSet::new();
        for (line, a) in &self.axioms {
            let s = self.lookup(*line, &a.subject)?;
            let o = self.lookup(*line, &a.object)?;
            if !seen_axioms.insert((a.kind, s, a.property.clone(), o)) {
                continue;
            }
            let ai = graph.axioms.len();
            graph.axioms.push(AxiomRec {
                kind: a.kind,
                subject: s,
                property: a.property.clone(),
                object: o,
            });
            graph.axioms_by_subject[s].push(ai);
            graph.axioms_by_object[o].push(ai);
        }
        for (i, c) in concepts.iter().enumerate() {
            if let Some(cui) = &c.cui {
                graph.cui_index.entry(cui.clone()).or_default().push(i);
            }
        }
        graph.index = self.index;
        graph.concepts = concepts;
        graph.compute_stats();
        Ok(graph)
    }
}

fn malformed(line: usize, message: String) -> OntologyError {
    OntologyError::Malformed { line, message }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum JsonRecord {
    Concept {
        id: String,
        #[serde(default)]
        cui: Option<String>,
        label: String,
        #[serde(default)]
        alt_labels: Vec<String>,
    },
    Edge {
        subject: String,
        predicate: String,
        object: String,
    },
    Axiom {
        kind: String,
        subject: String,
        #[serde(default)]
        property: Option<String>,
        object: String,
    },
}

/// Parse one ontology from `source`. `name` is recorded as each concept's
/// source ontology.
pub fn parse_ontology<R: Read>(
    source: R,
    format: OntologyFormat,
    name: &str,
) -> Result<OntologyGraph> {
    let mut builder = GraphBuilder::new(name);
    let reader = BufReader::new(source);
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match format {
            OntologyFormat::Triples => parse_triples_line(&mut builder, line_no, trimmed)?,
            OntologyFormat::AxiomJson => parse_json_line(&mut builder, line_no, trimmed)?,
        }
    }
    builder.build()
}

pub fn parse_ontology_str(text: &str, format: OntologyFormat, name: &str) -> Result<OntologyGraph> {
    parse_ontology(text.as_bytes(), format, name)
}

fn parse_triples_line(builder: &mut GraphBuilder, line: usize, text: &str) -> Result<()> {
    let (tag, rest) = split_field(text);
    match tag {
        "C" => {
            let (id, rest) = split_field(rest);
            let (cui, label) = split_field(rest);
            if id.is_empty() || cui.is_empty() || label.is_empty() {
                return Err(malformed(line, "concept record needs `C <id> <cui|-> <label>`".into()));
            }
            let cui = (cui != "-").then_some(cui);
            builder.concept_at(line, id, cui, label)
        }
        "L" => {
            let (id, label) = split_field(rest);
            if id.is_empty() || label.is_empty() {
                return Err(malformed(line, "label record needs `L <id> <label>`".into()));
            }
            builder.alt_labels.push((line, id.to_string(), label.to_string()));
            Ok(())
        }
        "E" => {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            let [s, p, o] = fields[..] else {
                return Err(malformed(
                    line,
                    format!("edge record needs 3 fields, found {}", fields.len()),
                ));
            };
            builder.edges.push((
                line,
                Edge {
                    subject: s.to_string(),
                    predicate: p.to_string(),
                    object: o.to_string(),
                },
            ));
            Ok(())
        }
        "A" => {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            let [kind, s, p, o] = fields[..] else {
                return Err(malformed(
                    line,
                    format!("axiom record needs 4 fields, found {}", fields.len()),
                ));
            };
            let kind: AxiomKind = kind.parse().map_err(|m| malformed(line, m))?;
            builder.axiom_at(
                line,
                Axiom {
                    kind,
                    subject: s.to_string(),
                    property: (p != "-").then(|| p.to_string()),
                    object: o.to_string(),
                },
            )
        }
        other => Err(malformed(line, format!("unknown record tag `{other}`"))),
    }
}

fn parse_json_line(builder: &mut GraphBuilder, line: usize, text: &str) -> Result<()> {
    let record: JsonRecord =
        serde_json::from_str(text).map_err(|e| malformed(line, e.to_string()))?;
    match record {
        JsonRecord::Concept {
            id,
            cui,
            label,
            alt_labels,
        } => {
            builder.concept_at(line, &id, cui.as_deref(), &label)?;
            for alt in alt_labels {
                builder.alt_labels.push((line, id.clone(), alt));
            }
            Ok(())
        }
        JsonRecord::Edge {
            subject,
            predicate,
            object,
        } => {
            if predicate.is_empty() || predicate.chars().any(char::is_whitespace) {
                return Err(malformed(line, format!("invalid predicate `{predicate}`")));
            }
            builder.edges.push((
                line,
                Edge {
                    subject,
                    predicate,
                    object,
                },
            ));
            Ok(())
        }
        JsonRecord::Axiom {
            kind,
            subject,
            property,
            object,
        } => {
            let kind: AxiomKind = kind.parse().map_err(|m| malformed(line, m))?;
            builder.axiom_at(
                line,
                Axiom {
                    kind,
                    subject,
                    property,
                    object,
                },
            )
        }
    }
}

fn split_field(text: &str) -> (&str, &str) {
    let text = text.trim_start();
    match text.find(char::is_whitespace) {
        Some(pos) => (&text[..pos], text[pos..].trim()),
        None => (text, ""),
    }
}

/// Merge graphs, unifying concepts that share a CUI.
///
/// The unified node keeps the first-seen id and preferred label; other
/// labels become alternative labels. Concepts without a CUI stay distinct;
/// an id clash is resolved by suffixing `@<graph position>`.
pub fn merge_graphs(graphs: &[&OntologyGraph]) -> OntologyGraph {
    let source = graphs
        .iter()
        .flat_map(|g| g.concepts.iter().map(|c| c.source_ontology.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect::<Vec<_>>()
        .join("+");
    let mut merged: Vec<Concept> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut by_cui: HashMap<String, usize> = HashMap::new();
    let mut edges: Vec<Edge> = Vec::new();
    let mut axioms: Vec<Axiom> = Vec::new();

    for (gi, g) in graphs.iter().enumerate() {
        let mut remap: Vec<usize> = Vec::with_capacity(g.concepts.len());
        for c in &g.concepts {
            if let Some(&target) = c.cui.as_ref().and_then(|cui| by_cui.get(cui)) {
                let node = &mut merged[target];
                for label in std::iter::once(&c.preferred_label).chain(&c.alt_labels) {
                    if node.preferred_label != *label && !node.alt_labels.contains(label) {
                        node.alt_labels.push(label.clone());
                    }
                }
                remap.push(target);
                continue;
            }
            let mut id = c.id.clone();
            if ids.contains_key(&id) {
                let mut k = gi + 1;
                loop {
                    let candidate = format!("{}@{}", c.id, k);
                    if !ids.contains_key(&candidate) {
                        id = candidate;
                        break;
                    }
                    k += graphs.len();
                }
            }
            let idx = merged.len();
            ids.insert(id.clone(), idx);
            if let Some(cui) = &c.cui {
                by_cui.insert(cui.clone(), idx);
            }
            merged.push(Concept { id, ..c.clone() });
            remap.push(idx);
        }
        for e in &g.edges {
            edges.push(Edge {
                subject: merged[remap[e.subject]].id.clone(),
                predicate: e.predicate.clone(),
                object: merged[remap[e.object]].id.clone(),
            });
        }
        for a in &g.axioms {
            axioms.push(Axiom {
                kind: a.kind,
                subject: merged[remap[a.subject]].id.clone(),
                property: a.property.clone(),
                object: merged[remap[a.object]].id.clone(),
            });
        }
    }

    let mut builder = GraphBuilder::new(source);
    for c in merged {
        builder.index.insert(c.id.clone(), builder.concepts.len());
        builder.concepts.push(c);
    }
    builder.edges = edges.into_iter().map(|e| (0, e)).collect();
    builder.axioms = axioms.into_iter().map(|a| (0, a)).collect();
    builder
        .build()
        .expect("merged graph references only merged concepts")
}


#[cfg(test)]
mod tests {
    use super::fixtures::ONT_A;
    use super::*;

    fn ont_a() -> OntologyGraph {
        parse_ontology_str(ONT_A, OntologyFormat::Triples, "onta").unwrap()
    }

    #[test]
    fn parses_fixture_counts() {
        let g = ont_a();
        assert_eq!(g.concept_count(), 4);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.axiom_count(), 2);
        assert_eq!(
            g.stats(),
            OntologyStats {
                concept_count: 4,
                property_count: 2,
                max_subclass_depth: 1
            }
        );
        assert_eq!(g.concept("Drug1").unwrap().source_ontology, "onta");
    }

    #[test]
    fn empty_file_gives_empty_graph() {
        let g = parse_ontology_str("", OntologyFormat::Triples, "e").unwrap();
        assert!(g.is_empty());
        assert_eq!(g.stats(), OntologyStats::default());
        let g = parse_ontology_str("# only a comment\n\n", OntologyFormat::AxiomJson, "e").unwrap();
        assert_eq!(g.stats(), OntologyStats::default());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_ontology_str("C a - A\nE a b\n", OntologyFormat::Triples, "x").unwrap_err();
        assert!(matches!(err, OntologyError::Malformed { line: 2, .. }), "{err}");
        let err = parse_ontology_str("C a - A\nX foo\n", OntologyFormat::Triples, "x").unwrap_err();
        assert!(matches!(err, OntologyError::Malformed { line: 2, .. }));
        let err =
            parse_ontology_str("C a - A\nC b - B\nA some a - b\n", OntologyFormat::Triples, "x")
                .unwrap_err();
        assert!(matches!(err, OntologyError::Malformed { line: 3, .. }));
        let err = parse_ontology_str("C a - A\nA sub a p a\n", OntologyFormat::Triples, "x")
            .unwrap_err();
        assert!(matches!(err, OntologyError::Malformed { line: 2, .. }));
        let err = parse_ontology_str("C a -\n", OntologyFormat::Triples, "x").unwrap_err();
        assert!(matches!(err, OntologyError::Malformed { line: 1, .. }));
    }

    #[test]
    fn duplicate_and_dangling_are_errors() {
        let err = parse_ontology_str("C a - A\nC a - B\n", OntologyFormat::Triples, "x").unwrap_err();
        assert!(matches!(err, OntologyError::DuplicateConcept { line: 2, ref id } if id == "a"));
        let err = parse_ontology_str("C a - A\nE a p ghost\n", OntologyFormat::Triples, "x")
            .unwrap_err();
        assert!(
            matches!(err, OntologyError::DanglingReference { line: 2, ref id } if id == "ghost")
        );
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn json_format_matches_triples() {
        let json = r#"{"type":"concept","id":"Drug1","cui":"C001","label":"Fludarabine"}
{"type":"concept","id":"ADRNode","cui":"C003","label":"Fludarabine Adverse Reaction"}
{"type":"concept","id":"Finding1","cui":"C004","label":"Finding"}
{"type":"concept","id":"Reaction1","cui":"C002","label":"Cough"}
{"type":"edge","subject":"Drug1","predicate":"causativeAgentOf","object":"ADRNode"}
{"type":"axiom","kind":"some","subject":"ADRNode","property":"hasFinding","object":"Finding1"}
{"type":"axiom","kind":"sub","subject":"Reaction1","object":"Finding1"}
"#;
        let g = parse_ontology_str(json, OntologyFormat::AxiomJson, "onta").unwrap();
        assert_eq!(g.to_exchange_format(), ont_a().to_exchange_format());
        let err = parse_ontology_str("{\"type\":\"edge\"}\n", OntologyFormat::AxiomJson, "x")
            .unwrap_err();
        assert!(matches!(err, OntologyError::Malformed { line: 1, .. }));
    }

    #[test]
    fn resolve_cui_on_fixture() {
        let g = ont_a();
        assert_eq!(g.resolve_cui("C001"), vec!["Drug1".to_string()]);
        assert!(g.resolve_cui("C999").is_empty());
    }

    #[test]
    fn neighbors_on_fixture() {
        let g = ont_a();
        assert_eq!(
            g.neighbors("Drug1", Direction::Out).unwrap(),
            vec![Neighbor {
                label: "causativeAgentOf".into(),
                target: "ADRNode".into(),
                traversal: Traversal::Forward
            }]
        );
        assert!(g.neighbors("Drug1", Direction::In).unwrap().is_empty());
        assert_eq!(
            g.neighbors("ADRNode", Direction::Both).unwrap(),
            vec![Neighbor {
                label: "causativeAgentOf^-1".into(),
                target: "Drug1".into(),
                traversal: Traversal::Inverse
            }]
        );
        assert!(matches!(
            g.neighbors("Nope", Direction::Out),
            Err(OntologyError::UnknownConcept(_))
        ));
    }

    #[test]
    fn axiom_steps_on_fixture() {
        let g = ont_a();
        assert_eq!(
            g.axiom_steps("ADRNode").unwrap(),
            vec![AxiomStep {
                labels: vec!["subClassOf".into(), "some hasFinding".into()],
                target: "Finding1".into()
            }]
        );
        let from_finding = g.axiom_steps("Finding1").unwrap();
        assert!(from_finding.contains(&AxiomStep {
            labels: vec!["superClassOf".into()],
            target: "Reaction1".into()
        }));
        assert!(from_finding.contains(&AxiomStep {
            labels: vec!["some hasFinding^-1".into(), "superClassOf".into()],
            target: "ADRNode".into()
        }));
        assert!(g.axiom_steps("Drug1").unwrap().is_empty());
        assert!(g.axiom_steps("Nope").is_err());
    }

    #[test]
    fn equivalence_and_membership_steps() {
        let g = parse_ontology_str(
            "C a - A\nC b - B\nC c - C\nA equiv a - b\nA and c - a\nA or c - b\nA only a r c\n",
            OntologyFormat::Triples,
            "x",
        )
        .unwrap();
        let a = g.axiom_steps("a").unwrap();
        assert!(a.contains(&AxiomStep {
            labels: vec!["equivalentTo".into()],
            target: "b".into()
        }));
        assert!(a.contains(&AxiomStep {
            labels: vec!["memberOf⊓^-1".into()],
            target: "c".into()
        }));
        assert!(a.contains(&AxiomStep {
            labels: vec!["subClassOf".into(), "only r".into()],
            target: "c".into()
        }));
        let b = g.axiom_steps("b").unwrap();
        assert!(b.contains(&AxiomStep {
            labels: vec!["equivalentTo".into()],
            target: "a".into()
        }));
        let c = g.axiom_steps("c").unwrap();
        assert!(c.contains(&AxiomStep {
            labels: vec!["memberOf⊓".into()],
            target: "a".into()
        }));
        assert!(c.contains(&AxiomStep {
            labels: vec!["memberOf⊔".into()],
            target: "b".into()
        }));
    }

    #[test]
    fn label_inversion_round_trips() {
        for l in ["subClassOf", "superClassOf", "equivalentTo", "some r", "treats", "memberOf⊔"] {
            assert_eq!(invert_label(&invert_label(l)), l);
        }
        assert_eq!(invert_label("treats"), "treats^-1");
    }

    #[test]
    fn subclass_depth_ignores_cycles() {
        let g = parse_ontology_str(
            "C a - A\nC b - B\nC c - C\nC d - D\nA sub a - b\nA sub b - c\nA sub c - a\nA sub d - a\n",
            OntologyFormat::Triples,
            "x",
        )
        .unwrap();
        assert!(g.stats().max_subclass_depth >= 2);
        assert!(g.stats().max_subclass_depth <= 3);
        let chain = parse_ontology_str(
            "C a - A\nC b - B\nC c - C\nA sub a - b\nA sub b - c\n",
            OntologyFormat::Triples,
            "x",
        )
        .unwrap();
        assert_eq!(chain.stats().max_subclass_depth, 2);
    }

    #[test]
    fn merge_is_idempotent_on_fixture() {
        let a = ont_a();
        let m = merge_graphs(&[&a, &a]);
        assert_eq!(m.to_exchange_format(), a.to_exchange_format());
        assert_eq!(m.stats(), a.stats());
    }

    #[test]
    fn merge_unifies_shared_cui() {
        let g1 = parse_ontology_str(
            "C x C001 Drug\nC y C002 Thing\nE x treats y\n",
            OntologyFormat::Triples,
            "g1",
        )
        .unwrap();
        let g2 = parse_ontology_str(
            "C drugA C001 Drug A\nC z - Other\nE z relatedTo drugA\n",
            OntologyFormat::Triples,
            "g2",
        )
        .unwrap();
        let m = merge_graphs(&[&g1, &g2]);
        assert_eq!(m.resolve_cui("C001"), vec!["x".to_string()]);
        assert_eq!(m.concept_count(), 3);
        let x = m.concept("x").unwrap();
        assert_eq!(x.alt_labels, vec!["Drug A".to_string()]);
        let incident: Vec<_> = m.neighbors("x", Direction::Both).unwrap();
        assert_eq!(incident.len(), 2);
    }

    #[test]
    fn merge_unifies_duplicate_cuis_within_one_graph() {
        let g = parse_ontology_str(
            "C a C1 Alpha\nC b C1 Alpha bis\nC c - Gamma\nE a p c\nE b q c\n",
            OntologyFormat::Triples,
            "g",
        )
        .unwrap();
        assert_eq!(g.resolve_cui("C1").len(), 2);
        let m = merge_graphs(&[&g]);
        assert_eq!(m.resolve_cui("C1"), vec!["a".to_string()]);
        assert_eq!(m.neighbors("a", Direction::Out).unwrap().len(), 2);
    }

    #[test]
    fn merge_keeps_cuiless_clashes_distinct() {
        let g1 = parse_ontology_str("C x - X1\n", OntologyFormat::Triples, "g1").unwrap();
        let g2 = parse_ontology_str("C x - X2\n", OntologyFormat::Triples, "g2").unwrap();
        let m = merge_graphs(&[&g1, &g2]);
        assert_eq!(m.concept_count(), 2);
        assert!(m.contains("x@2"));
    }

    #[test]
    fn serialization_round_trip_is_canonical() {
        let g = ont_a();
        let text = g.to_exchange_format();
        let again = parse_ontology_str(&text, OntologyFormat::Triples, "onta").unwrap();
        assert_eq!(again.to_exchange_format(), text);
        assert_eq!(again.digest(), g.digest());
    }
}
