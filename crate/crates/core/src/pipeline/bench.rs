use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::onto_store::{parse_ontology, OntologyGraph};
use crate::path_reasoner::{explore_path, explore_symbolic_path};

/// Measurement columns of the report, after the ontology name.
pub const BENCH_COLUMNS: [&str; 7] = [
    "size_kb", "parse_s", "direct_s", "one_hop_s", "two_hop_s", "axiom_1_s", "axiom_2_s",
];

const MIN_REPEATS: usize = 5;

/// One ontology's timings in seconds (medians). Query columns are `None`
/// when the pair sample is empty; everything is `None` for a failed row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub ontology: String,
    pub size_kb: Option<f64>,
    pub parse: Option<f64>,
    pub direct: Option<f64>,
    pub one_hop: Option<f64>,
    pub two_hop: Option<f64>,
    pub axiom_1: Option<f64>,
    pub axiom_2: Option<f64>,
    pub error: Option<String>,
}

impl BenchRow {
    fn failed(ontology: String, error: String) -> Self {
        BenchRow {
            ontology,
            size_kb: None,
            parse: None,
            direct: None,
            one_hop: None,
            two_hop: None,
            axiom_1: None,
            axiom_2: None,
            error: Some(error),
        }
    }

    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.size_kb,
            self.parse,
            self.direct,
            self.one_hop,
            self.two_hop,
            self.axiom_1,
            self.axiom_2,
        ]
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn time_median(repeats: usize, mut f: impl FnMut()) -> f64 {
    median(
        (0..repeats)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .collect(),
    )
}

fn concept_pairs(graph: &OntologyGraph, pairs: &[(String, String)]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (h, t) in pairs {
        for s in graph.resolve_cui(h) {
            for o in graph.resolve_cui(t) {
                if s != o {
                    out.push((s.clone(), o));
                }
            }
        }
    }
    out
}

fn bench_one(path: &Path, pairs: &[(String, String)], repeats: usize) -> BenchRow {
    let name = path.display().to_string();
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => return BenchRow::failed(name, e.to_string()),
    };
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("jsonl") => crate::onto_store::OntologyFormat::AxiomJson,
        _ => crate::onto_store::OntologyFormat::Triples,
    };
    let graph = match parse_ontology(bytes.as_slice(), format, &name) {
        Ok(g) => g,
        Err(e) => return BenchRow::failed(name, e.to_string()),
    };
    let parse = time_median(repeats, || {
        let g = parse_ontology(bytes.as_slice(), format, &name);
        std::hint::black_box(g.map(|g| g.concept_count()).ok());
    });
    let mut row = BenchRow {
        ontology: name,
        size_kb: Some(bytes.len() as f64 / 1024.0),
        parse: Some(parse),
        direct: None,
        one_hop: None,
        two_hop: None,
        axiom_1: None,
        axiom_2: None,
        error: None,
    };
    if pairs.is_empty() {
        return row;
    }
    let resolved = concept_pairs(&graph, pairs);
    let plain = |n: usize| {
        time_median(repeats, || {
            for (s, o) in &resolved {
                std::hint::black_box(explore_path(&graph, s, o, n).map(|p| p.len()).ok());
            }
        })
    };
    let symbolic = |n: usize| {
        time_median(repeats, || {
            for (s, o) in &resolved {
                std::hint::black_box(explore_symbolic_path(&graph, s, o, n).map(|p| p.len()).ok());
            }
        })
    };
    row.direct = Some(plain(1));
    row.one_hop = Some(plain(2));
    row.two_hop = Some(plain(3));
    row.axiom_1 = Some(symbolic(1));
    row.axiom_2 = Some(symbolic(2));
    row
}

/// Parse and query timings per ontology file, medians over at least five
/// runs. Unreadable or unparsable files give a failed row.
pub fn bench_parse(files: &[PathBuf], pairs: &[(String, String)], repeats: usize) -> Vec<BenchRow> {
    let repeats = repeats.max(MIN_REPEATS);
    files.iter().map(|f| bench_one(f, pairs, repeats)).collect()
}

/// Tab-separated report with a header line.
pub fn format_bench_report(rows: &[BenchRow]) -> String {
    let mut out = format!("ontology\t{}\tstatus\n", BENCH_COLUMNS.join("\t"));
    for r in rows {
        let cells: Vec<String> = r
            .values()
            .iter()
            .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default())
            .collect();
        let status = match &r.error {
            Some(e) => format!("failed: {}", e.replace(['\t', '\n'], " ")),
            None => "ok".into(),
        };
        out.push_str(&format!("{}\t{}\t{status}\n", r.ontology, cells.join("\t")));
    }
    out
}
