use std::collections::BTreeSet;
use std::fs::{self, File};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{OptimizerKind, RunConfig};
use super::context::{precompute_contexts, ContextStore};
use super::dataset::{DatasetSchema, ADVERSE, NOT_ADVERSE};
use super::metrics::{compute_metrics, Metrics};
use super::{PipelineError, Result};
use crate::aggregator::{
    bias_score, encode_relations, loss, predict, AggregateError, BiasResult, RelationVocabulary,
};
use crate::encoder::{encode_symbolic, load_embedding_cache, EmbeddingBackend, SentenceInstance};
use crate::gpgnn::{GraphInput, ModelCheckpoint, ModelError, ModelState, Mode};
use crate::onto_store::OntologyGraph;
use crate::path_reasoner::{PathTrace, SymbolicContext};

pub const CHECKPOINT_FORMAT: &str = "ontorel-run";
const CHECKPOINT_VERSION: u32 = 1;

/// A network together with the run settings and label set it was trained
/// with.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub relations: Vec<String>,
    pub network: ModelState,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    format: String,
    version: u32,
    config: RunConfig,
    relations: Vec<String>,
    network: ModelCheckpoint,
}

impl TrainedModel {
    pub fn to_json(&self) -> String {
        let saved = SavedModel {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            relations: self.relations.clone(),
            network: self.network.to_checkpoint(),
        };
        serde_json::to_string(&saved).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let saved: SavedModel = serde_json::from_str(text)?;
        if saved.format != CHECKPOINT_FORMAT || saved.version != CHECKPOINT_VERSION {
            return Err(PipelineError::Config(format!(
                "unsupported checkpoint {} v{}",
                saved.format, saved.version
            )));
        }
        saved.config.validate()?;
        let network = ModelState::from_checkpoint(&saved.network)?;
        if network.config != saved.config.model_config(saved.relations.len()) {
            return Err(PipelineError::Config(
                "network shape disagrees with the stored run configuration".into(),
            ));
        }
        Ok(TrainedModel {
            config: saved.config,
            relations: saved.relations,
            network,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| PipelineError::from(e).in_file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::from(e).in_file(path))?;
        Self::from_json(&text).map_err(|e| e.in_file(path))
    }

    pub fn relation_vocabulary(&self) -> Result<RelationVocabulary> {
        Ok(encode_relations(&self.relations, &text_backend(&self.config)?)?)
    }
}

fn load_backend(path: Option<&Path>, dim: usize) -> Result<EmbeddingBackend> {
    match path {
        None => Ok(EmbeddingBackend::hashed(dim)),
        Some(p) => {
            let f = File::open(p).map_err(|e| PipelineError::from(e).in_file(p))?;
            load_embedding_cache(f, Some(dim)).map_err(|e| PipelineError::from(e).in_file(p))
        }
    }
}

fn text_backend(config: &RunConfig) -> Result<EmbeddingBackend> {
    load_backend(config.text_embeddings.as_deref(), config.text_dim)
}

/// One instance ready for the network.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub instance: SentenceInstance,
    pub input: GraphInput,
    pub bias: BiasResult,
    pub gold: Option<usize>,
    pub context: SymbolicContext,
}

#[derive(Debug, Clone, Default)]
pub struct PreparedSet {
    pub items: Vec<PreparedItem>,
}

/// Attach contexts, symbolic encodings and bias scores.
pub fn prepare(
    instances: &[SentenceInstance],
    store: &ContextStore,
    vocab: &RelationVocabulary,
    config: &RunConfig,
) -> Result<PreparedSet> {
    let backend = text_backend(config)?;
    let items = instances
        .iter()
        .map(|inst| {
            let context = store.get(&inst.head_cui, &inst.tail_cui);
            // λ weights every symbolic contribution, so λ = 0 is the plain text GNN.
            let scaled = |c: &SymbolicContext| -> Vec<f64> {
                encode_symbolic(c, &backend, config.path_pooling)
                    .into_iter()
                    .map(|x| config.bias_weight * x)
                    .collect()
            };
            let symbolic = vec![scaled(&context), scaled(&context.reversed())];
            let bias = bias_score(vocab, &context, &backend, config.bias_mode, config.bias_weight);
            PreparedItem {
                input: GraphInput {
                    tokens: inst.tokens.clone(),
                    entities: vec![inst.head_span, inst.tail_span],
                    symbolic,
                },
                bias,
                gold: vocab.index_of(&inst.gold_relation),
                context,
                instance: inst.clone(),
            }
        })
        .collect();
    Ok(PreparedSet { items })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: TrainedModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn log_lines(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }
}

fn relation_labels(config: &RunConfig, train: &[SentenceInstance]) -> Vec<String> {
    match config.schema {
        DatasetSchema::AdeBinary => vec![ADVERSE.to_string(), NOT_ADVERSE.to_string()],
        DatasetSchema::PairwiseJson => train
            .iter()
            .map(|i| i.gold_relation.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a) ^ b)
}

#[allow(clippy::large_enum_variant)]
enum Optimizer {
    Sgd,
    Momentum { velocity: ModelState },
    Adam { m: ModelState, v: ModelState, t: i32 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, model: &ModelState) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Momentum => Optimizer::Momentum {
                velocity: model.zeros_like(),
            },
            OptimizerKind::Adam => Optimizer::Adam {
                m: model.zeros_like(),
                v: model.zeros_like(),
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut ModelState, grad: &ModelState, lr: f64, momentum: f64) {
        match self {
            Optimizer::Sgd => params.add_scaled(grad, -lr),
            Optimizer::Momentum { velocity } => {
                for ((_, v), (_, _, g)) in velocity.tensors_mut().into_iter().zip(grad.tensors()) {
                    for (vi, gi) in v.iter_mut().zip(g) {
                        *vi = momentum * *vi + gi;
                    }
                }
                params.add_scaled(velocity, -lr);
            }
            Optimizer::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                let grads = grad.tensors();
                let ms = m.tensors_mut();
                let vs = v.tensors_mut();
                for ((((_, p), (_, _, g)), (_, mt)), (_, vt)) in
                    params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs)
                {
                    for i in 0..p.len() {
                        mt[i] = B1 * mt[i] + (1.0 - B1) * g[i];
                        vt[i] = B2 * vt[i] + (1.0 - B2) * g[i] * g[i];
                        p[i] -= lr * (mt[i] / c1) / ((vt[i] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Loss and gradient of one item, added into `grad`.
fn accumulate(
    model: &ModelState,
    item: &PreparedItem,
    gold: usize,
    mode: Mode,
    grad: &mut ModelState,
) -> Result<f64> {
    let trace = model.forward(&item.input, mode)?;
    let probs = predict(&trace.logits, &item.bias.bias)?;
    let l = loss(&probs, gold)?;
    let mut dlogits = probs;
    dlogits[gold] -= 1.0;
    model.backward_into(&trace, &dlogits, grad);
    Ok(l)
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))
}

fn golds(set: &PreparedSet, what: &str) -> Result<Vec<usize>> {
    set.items
        .iter()
        .map(|it| {
            it.gold.ok_or_else(|| {
                PipelineError::Vocabulary(format!(
                    "{what} label `{}` is not a known relation",
                    it.instance.gold_relation
                ))
            })
        })
        .collect()
}

/// Mini-batch training of the summed cross-entropy loss. The parameters of
/// the epoch with the best validation micro-F1 (earliest on ties) are kept;
/// without a validation set the last epoch is kept.
pub fn train(
    config: &RunConfig,
    train_set: &[SentenceInstance],
    valid_set: &[SentenceInstance],
    graph: &OntologyGraph,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(PipelineError::Config("training set is empty".into()));
    }
    let relations = relation_labels(config, train_set);
    let vocab = encode_relations(&relations, &text_backend(config)?)?;
    let store = precompute_contexts(
        train_set.iter().chain(valid_set),
        graph,
        config.max_hops,
        config.context_cache.as_deref(),
    )?;
    let train_items = prepare(train_set, &store, &vocab, config)?;
    let valid_items = prepare(valid_set, &store, &vocab, config)?;
    let train_gold = golds(&train_items, "training")?;
    let valid_gold = golds(&valid_items, "validation")?;

    let tokens: Vec<String> = train_set
        .iter()
        .flat_map(|i| i.tokens.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let word_init = load_backend(config.word_embeddings.as_deref(), config.word_dim)?;
    let mut model = ModelState::new(
        config.model_config(relations.len()),
        &tokens,
        &word_init,
        config.seed,
    )?;
    let mut optimizer = Optimizer::new(config.optimizer, &model);
    let pool = thread_pool(config.threads)?;

    let mut log = Vec::new();
    let mut train_losses = Vec::new();
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut order: Vec<usize> = (0..train_items.items.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x5eed, epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mode_for = |i: usize| Mode::Train {
                seed: mix(config.seed, epoch as u64, i as u64),
            };
            let diverged = |e: PipelineError| match e {
                PipelineError::Aggregate(AggregateError::NonFinite(_))
                | PipelineError::Model(ModelError::NonFinite(_)) => PipelineError::Divergence {
                    epoch,
                    batch: b + 1,
                    detail: e.to_string(),
                },
                other => other,
            };
            let (batch_loss, grad) = if config.threads == 1 {
                let mut grad = model.zeros_like();
                let mut total = 0.0;
                for &i in batch {
                    total += accumulate(&model, &train_items.items[i], train_gold[i], mode_for(i), &mut grad)
                        .map_err(diverged)?;
                }
                (total, grad)
            } else {
                pool.install(|| {
                    batch
                        .par_iter()
                        .try_fold(
                            || (0.0, model.zeros_like()),
                            |(total, mut grad), &i| {
                                let l = accumulate(&model, &train_items.items[i], train_gold[i], mode_for(i), &mut grad)?;
                                Ok::<_, PipelineError>((total + l, grad))
                            },
                        )
                        .try_reduce(
                            || (0.0, model.zeros_like()),
                            |(la, mut ga), (lb, gb)| {
                                ga.add_scaled(&gb, 1.0);
                                Ok((la + lb, ga))
                            },
                        )
                })
                .map_err(diverged)?
            };
            if !batch_loss.is_finite() {
                return Err(PipelineError::Divergence {
                    epoch,
                    batch: b + 1,
                    detail: format!("batch loss {batch_loss}"),
                });
            }
            if let Some(name) = grad.first_non_finite() {
                return Err(PipelineError::Divergence {
                    epoch,
                    batch: b + 1,
                    detail: format!("non-finite gradient in {name}"),
                });
            }
            optimizer.step(&mut model, &grad, config.learning_rate, config.momentum);
            if let Some(name) = model.first_non_finite() {
                return Err(PipelineError::Divergence {
                    epoch,
                    batch: b + 1,
                    detail: format!("non-finite parameter in {name}"),
                });
            }
            epoch_loss += batch_loss;
        }
        let mean_loss = epoch_loss / train_items.items.len() as f64;
        train_losses.push(mean_loss);
        log.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss: mean_loss,
            accuracy: None,
            micro_f1: None,
            macro_f1: None,
        });
        log::info!("epoch {epoch}: train loss {mean_loss:.6}");

        if valid_items.items.is_empty() {
            best = Some((f64::NEG_INFINITY, epoch, model.clone()));
            continue;
        }
        let probs = pool.install(|| infer(&model, &valid_items))?;
        let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let valid_loss = probs
            .iter()
            .zip(&valid_gold)
            .map(|(p, &g)| loss(p, g))
            .sum::<std::result::Result<f64, _>>()?
            / valid_gold.len() as f64;
        let m = compute_metrics(&relations, &valid_gold, &predicted, positive_index(&relations));
        log.push(EpochRecord {
            epoch,
            split: "valid".into(),
            loss: valid_loss,
            accuracy: Some(m.accuracy),
            micro_f1: Some(m.micro_f1),
            macro_f1: Some(m.macro_f1),
        });
        if best.as_ref().is_none_or(|(score, _, _)| m.micro_f1 > *score) {
            best = Some((m.micro_f1, epoch, model.clone()));
        }
    }
    let (_, best_epoch, network) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: TrainedModel {
            config: config.clone(),
            relations,
            network,
        },
        log,
        best_epoch,
        train_losses,
    })
}

fn positive_index(relations: &[String]) -> Option<usize> {
    let is_binary = relations.len() == 2 && relations.iter().any(|r| r == NOT_ADVERSE);
    if is_binary {
        relations.iter().position(|r| r == ADVERSE)
    } else {
        None
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode probabilities, in item order.
fn infer(model: &ModelState, set: &PreparedSet) -> Result<Vec<Vec<f64>>> {
    set.items
        .par_iter()
        .map(|it| {
            let trace = model.forward(&it.input, Mode::Eval)?;
            Ok(predict(&trace.logits, &it.bias.bias)?)
        })
        .collect()
}

/// Prediction trace for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sentence: String,
    pub head: String,
    pub tail: String,
    pub head_cui: String,
    pub tail_cui: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    pub predicted: String,
    pub probability: f64,
    /// Relation the path text is closest to, when any path was found.
    pub bias_relation: Option<String>,
    pub bias_similarity: f64,
    pub bias: f64,
    pub paths: PathTrace,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<PredictionRecord>,
    pub contexts: ContextStore,
}

/// Predict every instance; gold labels outside the vocabulary are kept as
/// text only.
pub fn predict_instances(
    model: &TrainedModel,
    instances: &[SentenceInstance],
    graph: &OntologyGraph,
) -> Result<(Vec<PredictionRecord>, PreparedSet, ContextStore, Vec<usize>)> {
    let config = &model.config;
    let vocab = model.relation_vocabulary()?;
    let store = precompute_contexts(instances, graph, config.max_hops, config.context_cache.as_deref())?;
    let set = prepare(instances, &store, &vocab, config)?;
    let pool = thread_pool(config.threads)?;
    let probs = pool.install(|| infer(&model.network, &set))?;
    let mut predicted = Vec::with_capacity(probs.len());
    let records = set
        .items
        .iter()
        .zip(&probs)
        .map(|(it, p)| {
            let k = argmax(p);
            predicted.push(k);
            let span_text = |s: crate::encoder::Span| it.instance.tokens[s.start..s.end].join(" ");
            PredictionRecord {
                sentence: it.instance.text(),
                head: span_text(it.instance.head_span),
                tail: span_text(it.instance.tail_span),
                head_cui: it.instance.head_cui.clone(),
                tail_cui: it.instance.tail_cui.clone(),
                gold: Some(it.instance.gold_relation.clone()).filter(|g| !g.is_empty()),
                predicted: model.relations[k].clone(),
                probability: p[k],
                bias_relation: it.bias.best_relation.map(|r| model.relations[r].clone()),
                bias_similarity: it.bias.best_similarity,
                bias: it.bias.best_relation.map_or(0.0, |r| it.bias.bias[r]),
                paths: it.context.trace(),
            }
        })
        .collect();
    Ok((records, set, store, predicted))
}

/// Eval-mode metrics and prediction trace. Every gold label must belong to
/// the model's relation set.
pub fn evaluate(
    model: &TrainedModel,
    instances: &[SentenceInstance],
    graph: &OntologyGraph,
) -> Result<Evaluation> {
    let (predictions, set, contexts, predicted) = predict_instances(model, instances, graph)?;
    let gold = golds(&set, "evaluation")?;
    let metrics = compute_metrics(&model.relations, &gold, &predicted, positive_index(&model.relations));
    Ok(Evaluation {
        metrics,
        predictions,
        contexts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRow {
    pub max_hops: usize,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
}

/// Train and evaluate once per hop limit, sharing every other setting.
pub fn hop_ablation(
    config: &RunConfig,
    train_set: &[SentenceInstance],
    valid_set: &[SentenceInstance],
    test_set: &[SentenceInstance],
    graph: &OntologyGraph,
    hop_limits: &[usize],
) -> Result<Vec<HopRow>> {
    if hop_limits.is_empty() {
        return Err(PipelineError::Config("hop list is empty".into()));
    }
    hop_limits
        .iter()
        .map(|&n| {
            let cfg = RunConfig {
                max_hops: n,
                ..config.clone()
            };
            let outcome = train(&cfg, train_set, valid_set, graph)?;
            let m = evaluate(&outcome.model, test_set, graph)?.metrics;
            log::info!("hops {n}: macro-F1 {:.4}", m.macro_f1);
            Ok(HopRow {
                max_hops: n,
                macro_f1: m.macro_f1,
                micro_f1: m.micro_f1,
                accuracy: m.accuracy,
            })
        })
        .collect()
}
