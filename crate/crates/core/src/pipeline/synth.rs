//! Generated relation-extraction corpus with matching ontologies.
//!
//! Two kinds of instance:
//!
//! * path-determined: the sentence is neutral and the relation can only be
//!   read from an ontology chain between the two entities, whose key
//!   predicate is a variant of the relation label;
//! * cue: the sentence contains a cue verb for the relation and the
//!   entities have no ontology path.
//!
//! Every instance uses fresh entities, and every chain is its own connected
//! component, so raising the hop limit beyond the chain length finds nothing
//! new.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{DatasetRecord, DatasetSchema, EntityMention};
use super::Result;
use crate::encoder::SentenceInstance;
use crate::onto_store::{AxiomKind, GraphBuilder, OntologyGraph};

struct RelationSpec {
    label: &'static str,
    cues: [&'static str; 2],
    /// Key-predicate stems of training and validation chains.
    verb_forms: [&'static str; 2],
    /// Key-predicate stem of test chains when forms are held out.
    noun: &'static str,
}

const fn spec(
    label: &'static str,
    cues: [&'static str; 2],
    verb_forms: [&'static str; 2],
    noun: &'static str,
) -> RelationSpec {
    RelationSpec {
        label,
        cues,
        verb_forms,
        noun,
    }
}

// Labels name two content words. Training chains spell the verb, held-out
// test chains spell the noun, so only the label links the two.
const RELATIONS: [RelationSpec; 8] = [
    spec("treats_symptom", ["relieves", "cures"], ["treats", "treating"], "symptom"),
    spec("causes_rash", ["triggers", "induces"], ["causes", "causing"], "rash"),
    spec("prevents_fever", ["averts", "forestalls"], ["prevents", "preventing"], "fever"),
    spec("diagnoses_lesion", ["detects", "reveals"], ["diagnoses", "diagnosing"], "lesion"),
    spec("inhibits_kinase", ["suppresses", "dampens"], ["inhibits", "inhibiting"], "kinase"),
    spec("contains_compound", ["includes", "holds"], ["contains", "containing"], "compound"),
    spec("precedes_onset", ["antedates", "foreshadows"], ["precedes", "preceding"], "onset"),
    spec("regulates_hormone", ["modulates", "controls"], ["regulates", "regulating"], "hormone"),
];

const NEUTRAL: [&str; 4] = [
    "{h} and {t} were both noted in the record",
    "the study examined {h} together with {t}",
    "{t} was listed next to {h} in the chart",
    "records mention {h} alongside {t} this week",
];

const CUE: [&str; 3] = [
    "{h} {cue} {t} in many patients",
    "in this cohort {h} {cue} {t}",
    "{h} clearly {cue} {t} according to {t2}",
];

// Generic predicates and modifiers share no character trigram with a label.
const GENERIC: [&str; 5] = ["hasPart", "linkedWith", "belongsTo", "nearTo", "follows"];
const PREFIXES: [&str; 4] = ["", "may", "often", "also"];
const SUFFIXES: [&str; 4] = ["", "Effect", "Role", "Link"];
const SYLLABLES: [&str; 16] = [
    "ka", "zo", "ri", "mex", "tal", "vu", "pen", "dra", "lo", "sim", "qua", "ber", "nox", "fi", "gul", "te",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub instances: usize,
    pub relations: usize,
    /// Share of path-determined instances.
    pub path_fraction: f64,
    pub min_hops: usize,
    pub max_hops: usize,
    /// Probability that a chain's key step is an existential axiom.
    pub axiom_fraction: f64,
    /// Share of chains written to the secondary ontology.
    pub secondary_fraction: f64,
    /// Share of cue instances whose entities appear in the secondary
    /// ontology as isolated concepts.
    pub isolated_fraction: f64,
    /// Test chains use key-predicate forms never seen in training.
    pub heldout_forms: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            instances: 600,
            relations: 8,
            path_fraction: 0.6,
            min_hops: 1,
            max_hops: 3,
            axiom_fraction: 0.3,
            secondary_fraction: 0.0,
            isolated_fraction: 0.0,
            heldout_forms: false,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthSplit {
    pub records: Vec<DatasetRecord>,
    pub path_determined: Vec<bool>,
}

impl SynthSplit {
    pub fn instances(&self) -> Vec<SentenceInstance> {
        self.records
            .iter()
            .map(|r| {
                r.to_instance(DatasetSchema::PairwiseJson)
                    .expect("generated records are well formed")
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub relations: Vec<String>,
    pub train: SynthSplit,
    pub valid: SynthSplit,
    pub test: SynthSplit,
    pub primary: OntologyGraph,
    pub secondary: OntologyGraph,
}

impl SynthCorpus {
    /// Write `train.jsonl`, `valid.jsonl`, `test.jsonl`, `primary.txt` and
    /// `secondary.txt`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("train.jsonl"), self.train.to_jsonl())?;
        fs::write(dir.join("valid.jsonl"), self.valid.to_jsonl())?;
        fs::write(dir.join("test.jsonl"), self.test.to_jsonl())?;
        fs::write(dir.join("primary.txt"), self.primary.to_exchange_format())?;
        fs::write(dir.join("secondary.txt"), self.secondary.to_exchange_format())?;
        Ok(())
    }
}

fn camel(words: &[&str]) -> String {
    let mut out = String::new();
    for w in words.iter().filter(|w| !w.is_empty()) {
        if out.is_empty() {
            out.push_str(w);
        } else {
            let mut c = w.chars();
            if let Some(f) = c.next() {
                out.extend(f.to_uppercase());
                out.push_str(c.as_str());
            }
        }
    }
    out
}

const NAME_POOL: usize = 40;

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n).map(|_| *SYLLABLES.choose(rng).expect("syllables")).collect()
}

/// Fill a template, recording character offsets of `{h}` and `{t}`.
fn fill(template: &str, h: &str, t: &str, extra: &[(&str, &str)]) -> (String, (usize, usize), (usize, usize)) {
    let mut text = String::new();
    let mut hs = (0, 0);
    let mut ts = (0, 0);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("closed placeholder");
        let key = &rest[open + 1..close];
        let start = text.chars().count();
        let value = match key {
            "h" => h,
            "t" => t,
            other => extra.iter().find(|(k, _)| *k == other).map(|(_, v)| *v).expect("known placeholder"),
        };
        text.push_str(value);
        let end = text.chars().count();
        match key {
            "h" => hs = (start, end),
            "t" if ts == (0, 0) => ts = (start, end),
            _ => {}
        }
        rest = &rest[close + 1..];
    }
    text.push_str(rest);
    (text, hs, ts)
}

struct Builders {
    primary: GraphBuilder,
    secondary: GraphBuilder,
}

/// Generate the corpus. Splits are 70% train, 10% validation, 20% test.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    assert!(config.relations >= 1 && config.relations <= RELATIONS.len());
    assert!(config.min_hops >= 1 && config.min_hops <= config.max_hops);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let relations: Vec<String> = RELATIONS[..config.relations].iter().map(|r| r.label.to_string()).collect();
    let n_path = (config.instances as f64 * config.path_fraction).round() as usize;
    let mut kinds: Vec<bool> = (0..config.instances).map(|i| i < n_path).collect();
    kinds.shuffle(&mut rng);
    let n_train = config.instances * 7 / 10;
    let n_valid = config.instances / 10;
    let mut placement: Vec<usize> = (0..config.instances).collect();
    placement.shuffle(&mut rng);
    // rank of instance i in the split order
    let mut rank = vec![0; config.instances];
    for (pos, &i) in placement.iter().enumerate() {
        rank[i] = pos;
    }

    // Entity names repeat across instances and relations, so they carry no
    // label information.
    let mut names = std::collections::BTreeSet::new();
    while names.len() < NAME_POOL {
        names.insert(pseudo_word(&mut rng));
    }
    let names: Vec<String> = names.into_iter().collect();

    let mut b = Builders {
        primary: GraphBuilder::new("synthetic-primary"),
        secondary: GraphBuilder::new("synthetic-secondary"),
    };
    let mut entries: Vec<(DatasetRecord, bool)> = Vec::with_capacity(config.instances);
    let mut node = 0usize;
    for (i, &is_path) in kinds.iter().enumerate() {
        let r = i % config.relations;
        let rel = &RELATIONS[r];
        let h_text = names.choose(&mut rng).expect("names").clone();
        let mut t_text = names.choose(&mut rng).expect("names").clone();
        while t_text == h_text {
            t_text = names.choose(&mut rng).expect("names").clone();
        }
        let h_cui = format!("S{:06}", 2 * i);
        let t_cui = format!("S{:06}", 2 * i + 1);
        let (sentence, hs, ts) = if is_path {
            let tpl = NEUTRAL.choose(&mut rng).expect("templates");
            fill(tpl, &h_text, &t_text, &[])
        } else {
            let tpl = CUE.choose(&mut rng).expect("templates");
            let cue = rel.cues.choose(&mut rng).expect("cues");
            fill(tpl, &h_text, &t_text, &[("cue", cue), ("t2", "clinicians")])
        };

        if is_path {
            let target = if rng.gen::<f64>() < config.secondary_fraction {
                &mut b.secondary
            } else {
                &mut b.primary
            };
            let hops = rng.gen_range(config.min_hops..=config.max_hops);
            let mut ids = vec![format!("E{}", 2 * i)];
            for _ in 1..hops {
                ids.push(format!("M{node}"));
                node += 1;
            }
            ids.push(format!("E{}", 2 * i + 1));
            target.concept(&ids[0], Some(&h_cui), &h_text)?;
            for id in &ids[1..hops] {
                target.concept(id, None, &format!("intermediate {id}"))?;
            }
            target.concept(&ids[hops], Some(&t_cui), &t_text)?;
            let key_pos = rng.gen_range(0..hops);
            for step in 0..hops {
                let (s, o) = (&ids[step], &ids[step + 1]);
                if step == key_pos {
                    let is_test = rank[i] >= n_train + n_valid;
                    let all = [rel.verb_forms[0], rel.verb_forms[1], rel.noun];
                    let forms = match (config.heldout_forms, is_test) {
                        (false, _) => &all[..],
                        (true, false) => &all[..2],
                        (true, true) => &all[2..],
                    };
                    let key = camel(&[
                        PREFIXES.choose(&mut rng).expect("prefixes"),
                        forms.choose(&mut rng).expect("forms"),
                        SUFFIXES.choose(&mut rng).expect("suffixes"),
                    ]);
                    if rng.gen::<f64>() < config.axiom_fraction {
                        target.axiom(AxiomKind::ExistentialRestriction, s, Some(&key), o)?;
                    } else {
                        target.edge(s, &key, o);
                    }
                } else {
                    target.edge(s, GENERIC.choose(&mut rng).expect("generic"), o);
                }
            }
        } else if rng.gen::<f64>() < config.isolated_fraction {
            b.secondary.concept(&format!("E{}", 2 * i), Some(&h_cui), &h_text)?;
            b.secondary.concept(&format!("E{}", 2 * i + 1), Some(&t_cui), &t_text)?;
        }

        let record = DatasetRecord {
            sentence,
            head: EntityMention {
                text: h_text,
                cui: h_cui,
                start: hs.0,
                end: hs.1,
            },
            tail: EntityMention {
                text: t_text,
                cui: t_cui,
                start: ts.0,
                end: ts.1,
            },
            relation: Some(rel.label.to_string()),
            adverse: None,
        };
        entries.push((record, is_path));
    }
    let entries: Vec<(DatasetRecord, bool)> = placement.iter().map(|&i| entries[i].clone()).collect();
    let split = |part: &[(DatasetRecord, bool)]| SynthSplit {
        records: part.iter().map(|(r, _)| r.clone()).collect(),
        path_determined: part.iter().map(|(_, p)| *p).collect(),
    };
    Ok(SynthCorpus {
        relations,
        train: split(&entries[..n_train]),
        valid: split(&entries[n_train..n_train + n_valid]),
        test: split(&entries[n_train + n_valid..]),
        primary: b.primary.build()?,
        secondary: b.secondary.build()?,
    })
}
