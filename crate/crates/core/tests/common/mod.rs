#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ontorel::onto_store::{AxiomKind, GraphBuilder, OntologyGraph};
use ontorel::path_reasoner::{Path, Step};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ONT_A: &str = include_str!("../fixtures/ont-a.txt");

pub const PREDICATES: [&str; 4] = ["partOf", "hasSite", "treats", "linkedTo"];

const KINDS: [AxiomKind; 6] = [
    AxiomKind::SubClassOf,
    AxiomKind::EquivalentTo,
    AxiomKind::ExistentialRestriction,
    AxiomKind::UniversalRestriction,
    AxiomKind::IntersectionMember,
    AxiomKind::UnionMember,
];

/// Graph with `n{i}` concepts carrying CUI `C{i}`.
pub fn random_graph(seed: u64, max_nodes: usize, max_links: usize) -> OntologyGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=max_nodes);
    let links = rng.gen_range(0..=max_links);
    let mut b = GraphBuilder::new(format!("random-{seed}"));
    for i in 0..n {
        b.concept(&format!("n{i}"), Some(&format!("C{i}")), &format!("node {i}"))
            .unwrap();
    }
    for _ in 0..links {
        let s = format!("n{}", rng.gen_range(0..n));
        let o = format!("n{}", rng.gen_range(0..n));
        let p = *PREDICATES.choose(&mut rng).unwrap();
        if rng.gen_bool(0.35) {
            let kind = *KINDS.choose(&mut rng).unwrap();
            let prop = matches!(
                kind,
                AxiomKind::ExistentialRestriction | AxiomKind::UniversalRestriction
            )
            .then_some(p);
            b.axiom(kind, &s, prop, &o).unwrap();
        } else {
            b.edge(&s, p, &o);
        }
    }
    b.build().unwrap()
}

fn inverse(label: &str) -> String {
    match label {
        "subClassOf" => "superClassOf".into(),
        "superClassOf" => "subClassOf".into(),
        "equivalentTo" => "equivalentTo".into(),
        l => match l.strip_suffix("^-1") {
            Some(b) => b.into(),
            None => format!("{l}^-1"),
        },
    }
}

fn axiom_labels(kind: AxiomKind, prop: Option<&str>) -> Vec<String> {
    let p = prop.unwrap_or("");
    match kind {
        AxiomKind::SubClassOf => vec!["subClassOf".into()],
        AxiomKind::EquivalentTo => vec!["equivalentTo".into()],
        AxiomKind::ExistentialRestriction => vec!["subClassOf".into(), format!("some {p}")],
        AxiomKind::UniversalRestriction => vec!["subClassOf".into(), format!("only {p}")],
        AxiomKind::IntersectionMember => vec!["memberOf⊓".into()],
        AxiomKind::UnionMember => vec!["memberOf⊔".into()],
    }
}

/// (labels, target, from_axiom) moves per concept, by linear scan.
pub type Moves = BTreeMap<String, Vec<(Vec<String>, String, bool)>>;

pub fn scan_moves(g: &OntologyGraph, with_axioms: bool) -> Moves {
    let mut moves: Moves = g.concepts().iter().map(|c| (c.id.clone(), Vec::new())).collect();
    for e in g.edges() {
        moves
            .get_mut(&e.subject)
            .unwrap()
            .push((vec![e.predicate.clone()], e.object.clone(), false));
        moves
            .get_mut(&e.object)
            .unwrap()
            .push((vec![inverse(&e.predicate)], e.subject.clone(), false));
    }
    if with_axioms {
        for a in g.axioms() {
            let fwd = axiom_labels(a.kind, a.property.as_deref());
            let back: Vec<String> = fwd.iter().rev().map(|l| inverse(l)).collect();
            moves.get_mut(&a.subject).unwrap().push((fwd, a.object.clone(), true));
            moves.get_mut(&a.object).unwrap().push((back, a.subject.clone(), true));
        }
    }
    moves
}

fn dfs(
    moves: &Moves,
    target: &str,
    budget: usize,
    nodes: &mut Vec<String>,
    steps: &mut Vec<Step>,
    out: &mut BTreeSet<Path>,
) {
    let here = nodes.last().unwrap().clone();
    if here == target {
        out.insert(Path::new(steps.clone(), nodes.clone()));
        return;
    }
    if steps.len() == budget {
        return;
    }
    for (labels, next, from_axiom) in &moves[&here] {
        if nodes.contains(next) {
            continue;
        }
        nodes.push(next.clone());
        steps.push(Step {
            labels: labels.clone(),
            from_axiom: *from_axiom,
        });
        dfs(moves, target, budget, nodes, steps, out);
        steps.pop();
        nodes.pop();
    }
}

/// Every simple walk of at most `budget` moves from `s` to `t`.
pub fn oracle_walks(moves: &Moves, s: &str, t: &str, budget: usize) -> BTreeSet<Path> {
    let mut out = BTreeSet::new();
    if s != t {
        dfs(moves, t, budget, &mut vec![s.to_string()], &mut Vec::new(), &mut out);
    }
    out
}

/// One path per keyword multiset (smallest verbalization wins), shortest
/// first, at most `cap`.
pub fn oracle_dedup_cap(paths: &BTreeSet<Path>, cap: usize) -> Vec<Path> {
    let mut groups: BTreeMap<Vec<String>, Vec<&Path>> = BTreeMap::new();
    for p in paths {
        let mut key: Vec<String> = p.steps.iter().map(|s| s.verbalize()).collect();
        key.sort();
        groups.entry(key).or_default().push(p);
    }
    let mut kept: Vec<&Path> = groups
        .into_values()
        .map(|g| *g.iter().min_by_key(|p| (p.verbalize(), (**p).clone())).unwrap())
        .collect();
    kept.sort_by_key(|p| (p.hop_count(), p.verbalize(), (*p).clone()));
    kept.truncate(cap);
    kept.into_iter().cloned().collect()
}

/// Seven node-disjoint chains between `Protein` and `DietaryProtein`, one
/// per hop budget, after the derived-path growth table.
pub const PROTEIN_CHAINS: [&[&str]; 7] = [
    &["classifies"],
    &["mappedFrom", "classifies"],
    &["classifies", "classifies", "classifies"],
    &["classifies", "classifies", "mappedFrom", "classifies"],
    &["classifies", "classifies", "relatedTo", "relatedTo", "classifies"],
    &["classifies", "classifies", "mappedFrom", "relatedTo", "relatedTo", "classifies"],
    &[
        "classifies",
        "classifies",
        "mappedFrom",
        "relatedTo",
        "relatedTo",
        "classifies",
        "classifies",
    ],
];

pub fn protein_graph() -> OntologyGraph {
    let mut b = GraphBuilder::new("protein");
    b.concept("Protein", Some("C0033684"), "protein").unwrap();
    b.concept("DietaryProtein", Some("C0012173"), "dietary protein")
        .unwrap();
    for (c, chain) in PROTEIN_CHAINS.iter().enumerate() {
        let mut prev = "Protein".to_string();
        for (k, label) in chain.iter().enumerate() {
            let next = if k + 1 == chain.len() {
                "DietaryProtein".to_string()
            } else {
                let id = format!("chain{c}_{k}");
                b.concept(&id, None, &format!("intermediate {c} {k}")).unwrap();
                id
            };
            b.edge(&prev, label, &next);
            prev = next;
        }
    }
    b.build().unwrap()
}
