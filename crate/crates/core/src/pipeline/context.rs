use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineError, Result};
use crate::encoder::SentenceInstance;
use crate::onto_store::{merge_graphs, parse_ontology, OntologyFormat, OntologyGraph};
use crate::path_reasoner::{path_generation, SymbolicContext};

/// `(head_cui, tail_cui)`.
pub type PairKey = (String, String);

/// Symbolic contexts for a set of CUI pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextStore {
    pub max_hops: usize,
    pub graph_digest: String,
    pub contexts: BTreeMap<PairKey, SymbolicContext>,
    /// Pairs served from the disk cache on this call.
    pub cache_hits: usize,
}

impl ContextStore {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// Context for the pair, computing nothing: unknown pairs are empty.
    pub fn get(&self, head_cui: &str, tail_cui: &str) -> SymbolicContext {
        self.contexts
            .get(&(head_cui.to_string(), tail_cui.to_string()))
            .cloned()
            .unwrap_or_else(|| SymbolicContext::empty(head_cui, tail_cui, self.max_hops))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    key: String,
    max_hops: usize,
    graph_digest: String,
    contexts: Vec<SymbolicContext>,
}

fn cache_key(graph_digest: &str, max_hops: usize, pairs: &BTreeSet<PairKey>) -> String {
    let mut h = Sha256::new();
    h.update(graph_digest.as_bytes());
    h.update(format!("\nN={max_hops}\n").as_bytes());
    for (a, b) in pairs {
        h.update(format!("{}\t{}\n", a.len(), b.len()).as_bytes());
        h.update(a.as_bytes());
        h.update(b.as_bytes());
    }
    hex::encode(h.finalize())
}

/// One context per distinct `(head_cui, tail_cui)` pair of the datasets.
/// With a cache directory, results are stored under a key derived from the
/// graph digest, `max_hops` and the pair set, and a rerun reads them back.
pub fn precompute_contexts<'a>(
    datasets: impl IntoIterator<Item = &'a SentenceInstance>,
    graph: &OntologyGraph,
    max_hops: usize,
    cache_dir: Option<&Path>,
) -> Result<ContextStore> {
    let pairs: BTreeSet<PairKey> = datasets
        .into_iter()
        .map(|i| (i.head_cui.clone(), i.tail_cui.clone()))
        .collect();
    let digest = graph.digest();
    let key = cache_key(&digest, max_hops, &pairs);
    let cache_path: Option<PathBuf> = cache_dir.map(|d| d.join(format!("contexts-{key}.json")));

    if let Some(path) = cache_path.as_ref().filter(|p| p.exists()) {
        let file = File::open(path).map_err(|e| PipelineError::from(e).in_file(path))?;
        let cached: CacheFile =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| PipelineError::from(e).in_file(path))?;
        if cached.key == key && cached.contexts.len() == pairs.len() {
            let contexts: BTreeMap<PairKey, SymbolicContext> = cached
                .contexts
                .into_iter()
                .map(|c| ((c.source_cui.clone(), c.dest_cui.clone()), c))
                .collect();
            log::info!("context cache hits: {} of {}", contexts.len(), pairs.len());
            return Ok(ContextStore {
                max_hops,
                graph_digest: digest,
                cache_hits: contexts.len(),
                contexts,
            });
        }
        log::warn!("ignoring stale context cache {}", path.display());
    }

    let pair_list: Vec<&PairKey> = pairs.iter().collect();
    let computed: Vec<SymbolicContext> = pair_list
        .par_iter()
        .map(|(h, t)| path_generation(graph, h, t, max_hops))
        .collect::<std::result::Result<_, _>>()?;
    log::info!("context cache hits: 0 of {}", pairs.len());

    if let (Some(dir), Some(path)) = (cache_dir, cache_path.as_ref()) {
        fs::create_dir_all(dir).map_err(|e| PipelineError::from(e).in_file(dir))?;
        let body = CacheFile {
            key: key.clone(),
            max_hops,
            graph_digest: digest.clone(),
            contexts: computed.clone(),
        };
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(&body)?).map_err(|e| PipelineError::from(e).in_file(&tmp))?;
        fs::rename(&tmp, path).map_err(|e| PipelineError::from(e).in_file(path))?;
    }
    Ok(ContextStore {
        max_hops,
        graph_digest: digest,
        contexts: computed
            .into_iter()
            .map(|c| ((c.source_cui.clone(), c.dest_cui.clone()), c))
            .collect(),
        cache_hits: 0,
    })
}

/// Fraction of distinct dataset CUIs that resolve to a concept of the graph.
pub fn entity_coverage<'a>(
    dataset: impl IntoIterator<Item = &'a SentenceInstance>,
    graph: &OntologyGraph,
) -> f64 {
    let cuis: BTreeSet<&str> = dataset
        .into_iter()
        .flat_map(|i| [i.head_cui.as_str(), i.tail_cui.as_str()])
        .collect();
    if cuis.is_empty() {
        return 0.0;
    }
    let hit = cuis.iter().filter(|c| graph.has_cui(c)).count();
    hit as f64 / cuis.len() as f64
}

fn format_for(path: &Path) -> OntologyFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("jsonl") => OntologyFormat::AxiomJson,
        _ => OntologyFormat::Triples,
    }
}

/// Parse every file (`.json`/`.jsonl` as axiom records, anything else as
/// triples) and merge them into one graph.
pub fn load_ontologies(paths: &[PathBuf]) -> Result<OntologyGraph> {
    let mut graphs = Vec::with_capacity(paths.len());
    for p in paths {
        let file = File::open(p).map_err(|e| PipelineError::from(e).in_file(p))?;
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("ontology");
        let g = parse_ontology(file, format_for(p), name).map_err(|e| PipelineError::from(e).in_file(p))?;
        graphs.push(g);
    }
    Ok(match graphs.len() {
        0 => OntologyGraph::builder("empty").build()?,
        1 => graphs.pop().expect("one graph"),
        _ => merge_graphs(&graphs.iter().collect::<Vec<_>>()),
    })
}
