//! Multi-hop and axiom path enumeration between entity pairs.
//!
//! Paths are cycle-free walks over the ontology graph. A walk may use plain
//! edges in either direction; a symbolic walk additionally uses axiom steps
//! (one step per axiom, so `⊑ ∃R.D` counts as a single hop). Results are
//! deduplicated by their keyword multiset and verbalized into text for the
//! encoder.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::onto_store::{
    invert_labels, OntologyError, OntologyGraph, INVERSE_MARKER, MEMBER_OF_INTERSECTION,
    MEMBER_OF_UNION,
};

/// Default hop budget.
pub const DEFAULT_MAX_HOPS: usize = 5;
/// At most this many paths are kept per (pair, kind).
pub const MAX_PATHS_PER_KIND: usize = 64;

#[derive(Debug, Error)]
pub enum PathError {
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error("hop budget must be at least 1, got {0}")]
    InvalidHops(usize),
}

pub type Result<T, E = PathError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Plain,
    Axiom,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Step {
    pub labels: Vec<String>,
    pub from_axiom: bool,
}

impl Step {
    pub fn plain(label: &str) -> Self {
        Step {
            labels: vec![label.to_string()],
            from_axiom: false,
        }
    }

    pub fn axiom(labels: &[&str]) -> Self {
        Step {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            from_axiom: true,
        }
    }

    pub fn verbalize(&self) -> String {
        self.labels
            .iter()
            .map(|l| verbalize_label(l))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn inverted(&self) -> Step {
        Step {
            labels: invert_labels(&self.labels),
            from_axiom: self.from_axiom,
        }
    }
}

/// A walk between two concepts. `nodes` holds every visited concept id,
/// endpoints included, so `nodes.len() == steps.len() + 1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Path {
    pub kind: PathKind,
    pub steps: Vec<Step>,
    pub nodes: Vec<String>,
}

impl Path {
    pub fn new(steps: Vec<Step>, nodes: Vec<String>) -> Self {
        debug_assert_eq!(nodes.len(), steps.len() + 1);
        let kind = if steps.iter().any(|s| s.from_axiom) {
            PathKind::Axiom
        } else {
            PathKind::Plain
        };
        Path { kind, steps, nodes }
    }

    pub fn hop_count(&self) -> usize {
        self.steps.len()
    }

    pub fn source(&self) -> &str {
        &self.nodes[0]
    }

    pub fn target(&self) -> &str {
        self.nodes.last().map(String::as_str).unwrap_or_default()
    }

    pub fn verbalize(&self) -> String {
        verbalize_path(self)
    }

    /// Order-insensitive keyword multiset, as a sorted list of step texts.
    pub fn keywords(&self) -> Vec<String> {
        let mut words: Vec<String> = self.steps.iter().map(Step::verbalize).collect();
        words.sort();
        words
    }

    /// The same walk read from the other end.
    pub fn reversed(&self) -> Path {
        Path {
            kind: self.kind,
            steps: self.steps.iter().rev().map(Step::inverted).collect(),
            nodes: self.nodes.iter().rev().cloned().collect(),
        }
    }
}

/// All surviving paths for one CUI pair.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicContext {
    pub source_cui: String,
    pub dest_cui: String,
    pub max_hops: usize,
    pub plain_paths: Vec<Path>,
    pub axiom_paths: Vec<Path>,
}

impl SymbolicContext {
    pub fn empty(source_cui: &str, dest_cui: &str, max_hops: usize) -> Self {
        SymbolicContext {
            source_cui: source_cui.to_string(),
            dest_cui: dest_cui.to_string(),
            max_hops,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.plain_paths.is_empty() && self.axiom_paths.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.plain_paths.iter().chain(&self.axiom_paths)
    }

    /// Verbalizations of every path, plain first, joined into one text.
    pub fn joined_verbalization(&self) -> String {
        self.paths()
            .map(Path::verbalize)
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// The context for the reversed pair.
    pub fn reversed(&self) -> SymbolicContext {
        let flip = |paths: &[Path]| {
            let mut out: Vec<Path> = paths.iter().map(Path::reversed).collect();
            out.sort();
            out
        };
        SymbolicContext {
            source_cui: self.dest_cui.clone(),
            dest_cui: self.source_cui.clone(),
            max_hops: self.max_hops,
            plain_paths: flip(&self.plain_paths),
            axiom_paths: flip(&self.axiom_paths),
        }
    }

    pub fn trace(&self) -> PathTrace {
        PathTrace {
            head_cui: self.source_cui.clone(),
            tail_cui: self.dest_cui.clone(),
            max_hops: self.max_hops,
            paths: self
                .paths()
                .map(|p| PathTraceEntry {
                    kind: p.kind,
                    hop_count: p.hop_count(),
                    verbalization: p.verbalize(),
                    nodes: p.nodes.clone(),
                })
                .collect(),
        }
    }
}

/// Line-oriented export record for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTrace {
    pub head_cui: String,
    pub tail_cui: String,
    pub max_hops: usize,
    pub paths: Vec<PathTraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTraceEntry {
    pub kind: PathKind,
    pub hop_count: usize,
    pub verbalization: String,
    pub nodes: Vec<String>,
}

/// Every cycle-free walk of at most `max_hops` plain edges from `source`
/// to `target`.
pub fn explore_path(
    graph: &OntologyGraph,
    source: &str,
    target: &str,
    max_hops: usize,
) -> Result<BTreeSet<Path>> {
    check_hops(max_hops)?;
    let s = graph.idx(source)?;
    let t = graph.idx(target)?;
    Ok(Walker::new(graph, t, max_hops, false).run(s))
}

/// Every cycle-free walk mixing plain edges and axiom steps, with at least
/// one axiom step, of at most `max_hops` steps.
pub fn explore_symbolic_path(
    graph: &OntologyGraph,
    source: &str,
    target: &str,
    max_hops: usize,
) -> Result<BTreeSet<Path>> {
    check_hops(max_hops)?;
    let s = graph.idx(source)?;
    let t = graph.idx(target)?;
    Ok(Walker::new(graph, t, max_hops, true)
        .run(s)
        .into_iter()
        .filter(|p| p.kind == PathKind::Axiom)
        .collect())
}

/// Resolve both CUIs and collect the deduplicated plain and axiom paths
/// between every resolved concept pair. Unresolvable CUIs give an empty
/// context.
pub fn path_generation(
    graph: &OntologyGraph,
    source_cui: &str,
    dest_cui: &str,
    max_hops: usize,
) -> Result<SymbolicContext> {
    check_hops(max_hops)?;
    let mut ctx = SymbolicContext::empty(source_cui, dest_cui, max_hops);
    if source_cui == dest_cui {
        return Ok(ctx);
    }
    let mut plain = BTreeSet::new();
    let mut axiom = BTreeSet::new();
    for &s in graph.resolve_cui_idx(source_cui) {
        for &t in graph.resolve_cui_idx(dest_cui) {
            if s == t {
                continue;
            }
            for p in Walker::new(graph, t, max_hops, true).run(s) {
                match p.kind {
                    PathKind::Plain => plain.insert(p),
                    PathKind::Axiom => axiom.insert(p),
                };
            }
        }
    }
    ctx.plain_paths = cap_paths(dedup_paths(plain));
    ctx.axiom_paths = cap_paths(dedup_paths(axiom));
    Ok(ctx)
}

/// Keep one path per keyword multiset: the one with the smallest
/// verbalization (node sequence breaks remaining ties).
pub fn dedup_paths(paths: impl IntoIterator<Item = Path>) -> BTreeSet<Path> {
    let mut best: BTreeMap<Vec<String>, (String, Path)> = BTreeMap::new();
    for p in paths {
        let key = p.keywords();
        let text = p.verbalize();
        match best.get(&key) {
            Some((t, q)) if (t, q) <= (&text, &p) => {}
            _ => {
                best.insert(key, (text, p));
            }
        }
    }
    best.into_values().map(|(_, p)| p).collect()
}

/// Shorter paths first, then by verbalization; truncate to
/// [`MAX_PATHS_PER_KIND`]. Output is in that order.
pub fn cap_paths(paths: BTreeSet<Path>) -> Vec<Path> {
    let mut keyed: Vec<(usize, String, Path)> = paths
        .into_iter()
        .map(|p| (p.hop_count(), p.verbalize(), p))
        .collect();
    keyed.sort();
    keyed.truncate(MAX_PATHS_PER_KIND);
    keyed.into_iter().map(|(_, _, p)| p).collect()
}

/// Render one step label: camelCase and underscores split into lowercase
/// words, quantifiers kept as `some`/`only`, inverse labels suffixed with
/// `(inverse)`.
pub fn verbalize_label(label: &str) -> String {
    let (base, inverse) = match label.strip_suffix(INVERSE_MARKER) {
        Some(b) => (b, true),
        None => (label, false),
    };
    let mut text = if base == MEMBER_OF_INTERSECTION {
        "member of intersection".to_string()
    } else if base == MEMBER_OF_UNION {
        "member of union".to_string()
    } else if let Some(prop) = base.strip_prefix("some ") {
        format!("some {}", split_words(prop))
    } else if let Some(prop) = base.strip_prefix("only ") {
        format!("only {}", split_words(prop))
    } else {
        split_words(base)
    };
    if inverse {
        text.push_str(" (inverse)");
    }
    text
}

pub fn verbalize_path(path: &Path) -> String {
    path.steps
        .iter()
        .map(Step::verbalize)
        .collect::<Vec<_>>()
        .join(", ")
}

/// `causativeAgentOf` → `causative agent of`; `has_CUI_code` → `has cui code`.
pub fn split_words(label: &str) -> String {
    let chars: Vec<char> = label.chars().collect();
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c == '_' || c == '-' || c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            continue;
        }
        if c.is_uppercase() && !current.is_empty() {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            if prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower)
            {
                words.push(std::mem::take(&mut current));
            }
        }
        current.extend(c.to_lowercase());
    }
    if !current.is_empty() {
        words.push(current);
    }
    words.join(" ")
}

fn check_hops(max_hops: usize) -> Result<()> {
    if max_hops < 1 {
        return Err(PathError::InvalidHops(max_hops));
    }
    Ok(())
}

/// Depth-first enumeration with a per-path visited set, pruned by the
/// undirected distance to the target.
struct Walker<'g> {
    graph: &'g OntologyGraph,
    target: usize,
    max_hops: usize,
    with_axioms: bool,
    distance: HashMap<usize, usize>,
}

impl<'g> Walker<'g> {
    fn new(graph: &'g OntologyGraph, target: usize, max_hops: usize, with_axioms: bool) -> Self {
        let mut distance = HashMap::new();
        distance.insert(target, 0);
        let mut queue = VecDeque::from([target]);
        while let Some(node) = queue.pop_front() {
            let d = distance[&node];
            if d == max_hops {
                continue;
            }
            for next in graph.step_targets(node, with_axioms) {
                distance.entry(next).or_insert_with(|| {
                    queue.push_back(next);
                    d + 1
                });
            }
        }
        Walker {
            graph,
            target,
            max_hops,
            with_axioms,
            distance,
        }
    }

    fn run(&self, source: usize) -> BTreeSet<Path> {
        let mut out = BTreeSet::new();
        if source == self.target {
            return out;
        }
        let mut nodes = vec![source];
        let mut steps = Vec::new();
        self.visit(&mut nodes, &mut steps, &mut out);
        out
    }

    fn visit(&self, nodes: &mut Vec<usize>, steps: &mut Vec<Step>, out: &mut BTreeSet<Path>) {
        let node = *nodes.last().expect("walk has a start node");
        if node == self.target {
            let ids = nodes.iter().map(|&n| self.graph.id_of(n).to_string()).collect();
            out.insert(Path::new(steps.clone(), ids));
            return;
        }
        let remaining = self.max_hops - steps.len();
        if remaining == 0 {
            return;
        }
        for raw in self.graph.raw_steps(node, self.with_axioms) {
            if nodes.contains(&raw.target) {
                continue;
            }
            match self.distance.get(&raw.target) {
                Some(&d) if d < remaining => {}
                _ => continue,
            }
            nodes.push(raw.target);
            steps.push(Step {
                labels: raw.labels,
                from_axiom: raw.from_axiom,
            });
            self.visit(nodes, steps, out);
            steps.pop();
            nodes.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::onto_store::fixtures::ONT_A;
    use crate::onto_store::{parse_ontology_str, OntologyFormat};

    fn graph(text: &str) -> OntologyGraph {
        parse_ontology_str(text, OntologyFormat::Triples, "t").unwrap()
    }

    fn texts(paths: &BTreeSet<Path>) -> Vec<String> {
        paths.iter().map(Path::verbalize).collect()
    }

    #[test]
    fn plain_paths_on_fixture_are_empty() {
        let g = graph(ONT_A);
        assert!(explore_path(&g, "Drug1", "Reaction1", 3).unwrap().is_empty());
    }

    #[test]
    fn chain_fixture() {
        let g = graph("C A - a\nC B - b\nC C - c\nE A r1 B\nE B r2 C\n");
        let paths = explore_path(&g, "A", "C", 2).unwrap();
        assert_eq!(texts(&paths), vec!["r1, r2"]);
        assert!(explore_path(&g, "A", "C", 1).unwrap().is_empty());
    }

    #[test]
    fn direct_synonym_path() {
        let g = graph("C s C1 Sandimmun\nC c C2 Cyclosporin\nE s synonymOf c\n");
        let paths = explore_path(&g, "s", "c", 1).unwrap();
        assert_eq!(texts(&paths), vec!["synonym of"]);
    }

    #[test]
    fn symbolic_path_on_fixture() {
        let g = graph(ONT_A);
        let paths = explore_symbolic_path(&g, "Drug1", "Reaction1", 3).unwrap();
        assert_eq!(paths.len(), 1);
        let p = paths.iter().next().unwrap();
        assert_eq!(
            p.steps,
            vec![
                Step::plain("causativeAgentOf"),
                Step::axiom(&["subClassOf", "some hasFinding"]),
                Step::axiom(&["superClassOf"]),
            ]
        );
        assert_eq!(
            p.verbalize(),
            "causative agent of, sub class of some has finding, super class of"
        );
        assert!(explore_symbolic_path(&g, "Drug1", "ADRNode", 1).unwrap().is_empty());
        assert!(explore_symbolic_path(&g, "Drug1", "Reaction1", 2).unwrap().is_empty());
    }

    #[test]
    fn invalid_inputs() {
        let g = graph(ONT_A);
        assert!(matches!(
            explore_path(&g, "Drug1", "Reaction1", 0),
            Err(PathError::InvalidHops(0))
        ));
        assert!(matches!(
            explore_symbolic_path(&g, "Drug1", "Nope", 2),
            Err(PathError::Ontology(OntologyError::UnknownConcept(_)))
        ));
        assert!(path_generation(&g, "C001", "C002", 0).is_err());
    }

    #[test]
    fn generation_on_fixture() {
        let g = graph(ONT_A);
        let ctx = path_generation(&g, "C001", "C002", 3).unwrap();
        assert!(ctx.plain_paths.is_empty());
        assert_eq!(ctx.axiom_paths.len(), 1);
        let text = ctx.axiom_paths[0].verbalize();
        assert!(text.contains("causative agent of"));
        assert!(text.contains("some has finding"));

        assert!(path_generation(&g, "C001", "C001", 5).unwrap().is_empty());
        assert!(path_generation(&g, "C001", "C999", 5).unwrap().is_empty());
    }

    #[test]
    fn generation_unions_shared_cui_concepts() {
        let g = graph("C a X Alpha\nC a2 X Alpha two\nC b Y Beta\nE a p b\nE a2 q b\n");
        let ctx = path_generation(&g, "X", "Y", 1).unwrap();
        let texts: Vec<_> = ctx.plain_paths.iter().map(Path::verbalize).collect();
        assert_eq!(texts, vec!["p", "q"]);
    }

    #[test]
    fn dedup_by_keyword_multiset() {
        let a = Path::new(
            vec![Step::plain("r1"), Step::plain("r2")],
            vec!["a".into(), "x".into(), "b".into()],
        );
        let b = Path::new(
            vec![Step::plain("r2"), Step::plain("r1")],
            vec!["a".into(), "y".into(), "b".into()],
        );
        let kept = dedup_paths([b, a.clone()]);
        assert_eq!(kept.into_iter().collect::<Vec<_>>(), vec![a]);

        let one = Path::new(vec![Step::plain("r1")], vec!["a".into(), "b".into()]);
        let two = Path::new(
            vec![Step::plain("r1"), Step::plain("r1")],
            vec!["a".into(), "x".into(), "b".into()],
        );
        assert_eq!(dedup_paths([one, two]).len(), 2);
    }

    #[test]
    fn verbalization_rules() {
        let p = Path::new(
            vec![Step::plain("causativeAgentOf"), Step::plain("hasAdverseReaction")],
            vec!["a".into(), "b".into(), "c".into()],
        );
        assert_eq!(p.verbalize(), "causative agent of, has adverse reaction");
        let p = Path::new(
            vec![Step::axiom(&["subClassOf"]), Step::axiom(&["some hasFinding"])],
            vec!["a".into(), "b".into(), "c".into()],
        );
        assert_eq!(p.verbalize(), "sub class of, some has finding");
        let p = Path::new(vec![Step::plain("classifies")], vec!["a".into(), "b".into()]);
        assert_eq!(p.verbalize(), "classifies");
        assert_eq!(verbalize_label("treats^-1"), "treats (inverse)");
        assert_eq!(verbalize_label("only hasPart"), "only has part");
        assert_eq!(verbalize_label("memberOf⊔^-1"), "member of union (inverse)");
        assert_eq!(split_words("hasCUICode"), "has cui code");
        assert_eq!(split_words("mapped_from"), "mapped from");
    }

    #[test]
    fn reversed_context_mirrors_query() {
        let g = graph(ONT_A);
        let forward = path_generation(&g, "C001", "C002", 3).unwrap();
        let backward = path_generation(&g, "C002", "C001", 3).unwrap();
        assert_eq!(forward.reversed(), backward);
    }

    #[test]
    fn cap_prefers_short_paths() {
        let mut text = String::from("C s S src\nC t T dst\n");
        for i in 0..80 {
            text.push_str(&format!("C m{i} - mid\nE s p{i:02} m{i}\nE m{i} q t\n"));
        }
        text.push_str("E s direct t\n");
        let g = graph(&text);
        let ctx = path_generation(&g, "S", "T", 2).unwrap();
        assert_eq!(ctx.plain_paths.len(), MAX_PATHS_PER_KIND);
        assert_eq!(ctx.plain_paths[0].verbalize(), "direct");
        assert_eq!(ctx.plain_paths[1].verbalize(), "p00, q");
    }
}
