//! Graph neural network with generated transition matrices.
//!
//! For every ordered entity pair `(s, o)` and layer `n`, two perceptrons
//! generate `d×d` matrices: `A` from the mean-pooled sentence encoding and
//! `SP` from the symbolic path encoding. Their sum `M` drives propagation
//!
//! ```text
//! h[n+1][s] = Σ_{o≠s} relu(M[n][s,o] · h[n][o])
//! ```
//!
//! and the classifier reads `[h[1][head] ⊙ h[1][tail] ; … ; h[K][head] ⊙ h[K][tail]]`.
//! Node states start one-hot by entity index. Gradients are computed by
//! hand-written reverse passes over the cached forward activations.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{hashed_embed, position_category, Embedder, PositionCategory, PositionTable, Span};

pub const CHECKPOINT_FORMAT: &str = "ontorel-gnn";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Shape hyper-parameters of the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub position_dim: usize,
    /// Length of the symbolic encoding, twice the text-embedding width.
    pub symbolic_dim: usize,
    pub state_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub relations: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 50,
            position_dim: 50,
            symbolic_dim: 128,
            state_dim: 64,
            layers: 2,
            hidden: 256,
            relations: 2,
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("position_dim", self.position_dim),
            ("symbolic_dim", self.symbolic_dim),
            ("state_dim", self.state_dim),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("relations", self.relations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn sentence_dim(&self) -> usize {
        self.word_dim + self.position_dim
    }
}

/// Two-layer perceptron: `W2 · dropout(relu(W1 x + b1)) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Vec<f64>,
    z1: Vec<f64>,
    scale: Option<Vec<f64>>,
    a1: Vec<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut m = Mlp::zeros(input, hidden, output);
        let r1 = (6.0 / (input + hidden) as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.gen_range(-r1..r1));
        let r2 = (6.0 / (hidden + output) as f64).sqrt();
        m.w2.iter_mut().for_each(|w| *w = rng.gen_range(-r2..r2));
        m
    }

    pub fn forward(&self, x: &[f64], dropout: Option<(f64, &mut ChaCha8Rng)>) -> (Vec<f64>, MlpCache) {
        debug_assert_eq!(x.len(), self.input);
        let mut z1 = self.b1.clone();
        for (h, z) in z1.iter_mut().enumerate() {
            let row = &self.w1[h * self.input..(h + 1) * self.input];
            *z += dot(row, x);
        }
        let scale = dropout.filter(|(p, _)| *p > 0.0).map(|(p, rng)| {
            (0..self.hidden)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                .collect::<Vec<f64>>()
        });
        let a1: Vec<f64> = match &scale {
            Some(s) => z1.iter().zip(s).map(|(z, k)| z.max(0.0) * k).collect(),
            None => z1.iter().map(|z| z.max(0.0)).collect(),
        };
        let mut out = self.b2.clone();
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            *y += dot(row, &a1);
        }
        let cache = MlpCache {
            x: x.to_vec(),
            z1,
            scale,
            a1,
        };
        (out, cache)
    }

    /// Accumulate parameter gradients into `grad`; return `∂L/∂x`.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut da1 = vec![0.0; self.hidden];
        for (o, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b2[o] += g;
            let row = o * self.hidden..(o + 1) * self.hidden;
            for ((gw, w), (a, d)) in grad.w2[row.clone()]
                .iter_mut()
                .zip(&self.w2[row])
                .zip(cache.a1.iter().zip(da1.iter_mut()))
            {
                *gw += g * a;
                *d += g * w;
            }
        }
        let mut dx = vec![0.0; self.input];
        for h in 0..self.hidden {
            let mut dz = if cache.z1[h] > 0.0 { da1[h] } else { 0.0 };
            if let Some(s) = &cache.scale {
                dz *= s[h];
            }
            if dz == 0.0 {
                continue;
            }
            grad.b1[h] += dz;
            let row = h * self.input..(h + 1) * self.input;
            for ((gw, w), (x, d)) in grad.w1[row.clone()]
                .iter_mut()
                .zip(&self.w1[row])
                .zip(cache.x.iter().zip(dx.iter_mut()))
            {
                *gw += dz * x;
                *d += dz * w;
            }
        }
        dx
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Learnable token vectors; unknown tokens use a fixed hashed vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WordTable {
    pub dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub data: Vec<f64>,
}

impl WordTable {
    /// Rows initialised from `init`, one per distinct token, in the given
    /// order.
    pub fn new(tokens: &[String], init: &dyn Embedder) -> Self {
        let dim = init.dimension();
        let mut table = WordTable {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        };
        for t in tokens {
            if table.index.contains_key(t) {
                continue;
            }
            table.index.insert(t.clone(), table.tokens.len());
            table.tokens.push(t.clone());
            table.data.extend(init.embed(t));
        }
        table
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn zeroed(&self) -> Self {
        WordTable {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }
}

impl Embedder for WordTable {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        match self.row_of(text) {
            Some(i) => self.row(i).to_vec(),
            None => hashed_embed(text, self.dim),
        }
    }
}

/// All learnable parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub words: WordTable,
    pub positions: PositionTable,
    pub sentence_generators: Vec<Mlp>,
    pub symbolic_generators: Vec<Mlp>,
    pub classifier: Mlp,
}

/// One ordered pair's transition matrices for one layer, row-major `d×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub a: Vec<f64>,
    pub sp: Vec<f64>,
    pub m: Vec<f64>,
}

/// Network input for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub tokens: Vec<String>,
    /// Entity spans; entity 0 is the head, entity 1 the tail.
    pub entities: Vec<Span>,
    /// Symbolic encoding for each ordered pair, in [`ordered_pairs`] order.
    pub symbolic: Vec<Vec<f64>>,
}

/// Fully connected ordered pairs `(s, o)`, `s ≠ o`, row-major.
pub fn ordered_pairs(entities: usize) -> Vec<(usize, usize)> {
    (0..entities)
        .flat_map(|s| (0..entities).filter(move |&o| o != s).map(move |o| (s, o)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from a generator seeded with this value.
    Train { seed: u64 },
}

/// Everything the reverse pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pairs: Vec<(usize, usize)>,
    token_rows: Vec<Option<usize>>,
    categories: Vec<Vec<PositionCategory>>,
    sentence_caches: Vec<Vec<MlpCache>>,
    symbolic_caches: Vec<Vec<MlpCache>>,
    pub transitions: Vec<Vec<Transition>>,
    /// `states[n][v]` for `n` in `0..=K`.
    pub states: Vec<Vec<Vec<f64>>>,
    pre_activations: Vec<Vec<Vec<f64>>>,
    pub features: Vec<f64>,
    classifier_cache: MlpCache,
    pub logits: Vec<f64>,
}

/// One propagation step. `transitions[i]` belongs to `pairs[i]`.
pub fn propagate(
    pairs: &[(usize, usize)],
    transitions: &[&[f64]],
    states: &[Vec<f64>],
    dim: usize,
) -> Vec<Vec<f64>> {
    propagate_with_pre(pairs, transitions, states, dim).0
}

fn propagate_with_pre(
    pairs: &[(usize, usize)],
    transitions: &[&[f64]],
    states: &[Vec<f64>],
    dim: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut next = vec![vec![0.0; dim]; states.len()];
    let mut pre = Vec::with_capacity(pairs.len());
    for (&(s, o), m) in pairs.iter().zip(transitions) {
        let u: Vec<f64> = (0..dim).map(|i| dot(&m[i * dim..(i + 1) * dim], &states[o])).collect();
        for (h, x) in next[s].iter_mut().zip(&u) {
            *h += x.max(0.0);
        }
        pre.push(u);
    }
    (next, pre)
}

/// `[h[1][s] ⊙ h[1][o] ; … ; h[K][s] ⊙ h[K][o]]`; `states[0]` is skipped.
pub fn pair_features(states: &[Vec<Vec<f64>>], s: usize, o: usize) -> Vec<f64> {
    states[1..]
        .iter()
        .flat_map(|layer| layer[s].iter().zip(&layer[o]).map(|(a, b)| a * b))
        .collect()
}

impl ModelState {
    pub fn new(
        config: ModelConfig,
        vocabulary: &[String],
        word_init: &dyn Embedder,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if word_init.dimension() != config.word_dim {
            return Err(ModelError::Dimension {
                what: "word initialiser".into(),
                expected: config.word_dim,
                found: word_init.dimension(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d2 = config.state_dim * config.state_dim;
        let mut positions = PositionTable::zeros(config.position_dim);
        let r = (6.0 / (3 + config.position_dim) as f64).sqrt();
        positions.data.iter_mut().for_each(|p| *p = rng.gen_range(-r..r));
        let sentence_generators = (0..config.layers)
            .map(|_| Mlp::init(config.sentence_dim(), config.hidden, d2, &mut rng))
            .collect();
        let symbolic_generators = (0..config.layers)
            .map(|_| Mlp::init(config.symbolic_dim, config.hidden, d2, &mut rng))
            .collect();
        let classifier = Mlp::init(
            config.layers * config.state_dim,
            config.hidden,
            config.relations,
            &mut rng,
        );
        Ok(ModelState {
            config,
            words: WordTable::new(vocabulary, word_init),
            positions,
            sentence_generators,
            symbolic_generators,
            classifier,
        })
    }

    /// A zero tensor of every parameter, used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let zero = |m: &Mlp| Mlp::zeros(m.input, m.hidden, m.output);
        ModelState {
            config: self.config,
            words: self.words.zeroed(),
            positions: PositionTable::zeros(self.positions.dim),
            sentence_generators: self.sentence_generators.iter().map(zero).collect(),
            symbolic_generators: self.symbolic_generators.iter().map(zero).collect(),
            classifier: zero(&self.classifier),
        }
    }

    /// Named parameter tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            ("word_table".into(), vec![self.words.len(), self.words.dim], &self.words.data),
            ("position_table".into(), vec![3, self.positions.dim], &self.positions.data),
        ];
        fn push_mlp<'a>(prefix: String, m: &'a Mlp, out: &mut Vec<(String, Vec<usize>, &'a [f64])>) {
            out.push((format!("{prefix}.w1"), vec![m.hidden, m.input], &m.w1));
            out.push((format!("{prefix}.b1"), vec![m.hidden], &m.b1));
            out.push((format!("{prefix}.w2"), vec![m.output, m.hidden], &m.w2));
            out.push((format!("{prefix}.b2"), vec![m.output], &m.b2));
        }
        for (n, m) in self.sentence_generators.iter().enumerate() {
            push_mlp(format!("sentence_generator.{n}"), m, &mut out);
        }
        for (n, m) in self.symbolic_generators.iter().enumerate() {
            push_mlp(format!("symbolic_generator.{n}"), m, &mut out);
        }
        push_mlp("classifier".into(), &self.classifier, &mut out);
        out
    }

    /// Mutable view of the same tensors, same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("word_table".into(), &mut self.words.data),
            ("position_table".into(), &mut self.positions.data),
        ];
        fn push<'a>(prefix: String, m: &'a mut Mlp, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
            out.push((format!("{prefix}.w1"), &mut m.w1));
            out.push((format!("{prefix}.b1"), &mut m.b1));
            out.push((format!("{prefix}.w2"), &mut m.w2));
            out.push((format!("{prefix}.b2"), &mut m.b2));
        }
        for (n, m) in self.sentence_generators.iter_mut().enumerate() {
            push(format!("sentence_generator.{n}"), m, &mut out);
        }
        for (n, m) in self.symbolic_generators.iter_mut().enumerate() {
            push(format!("symbolic_generator.{n}"), m, &mut out);
        }
        push("classifier".into(), &mut self.classifier, &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelState, scale: f64) {
        let src = other.tensors();
        for ((_, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, x) in dst.iter_mut().zip(s) {
                *d += scale * x;
            }
        }
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, _, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _, _)| name)
    }

    /// Transitions for one pair and layer, without dropout.
    pub fn generate_transitions(
        &self,
        pooled_sentence: &[f64],
        symbolic: &[f64],
        layer: usize,
    ) -> Result<Transition> {
        self.check_len("pooled sentence", self.config.sentence_dim(), pooled_sentence.len())?;
        self.check_len("symbolic encoding", self.config.symbolic_dim, symbolic.len())?;
        if layer >= self.config.layers {
            return Err(ModelError::Config(format!(
                "layer {layer} out of range for {} layers",
                self.config.layers
            )));
        }
        let (a, _) = self.sentence_generators[layer].forward(pooled_sentence, None);
        let (sp, _) = self.symbolic_generators[layer].forward(symbolic, None);
        let m = a.iter().zip(&sp).map(|(x, y)| x + y).collect();
        Ok(Transition { a, sp, m })
    }

    /// Classifier logits for the pair `(s, o)` given states for layers
    /// `0..=K`.
    pub fn classify(&self, states: &[Vec<Vec<f64>>], s: usize, o: usize) -> Vec<f64> {
        self.classifier.forward(&pair_features(states, s, o), None).0
    }

    fn check_len(&self, what: &str, expected: usize, found: usize) -> Result<()> {
        if expected != found {
            return Err(ModelError::Dimension {
                what: what.to_string(),
                expected,
                found,
            });
        }
        Ok(())
    }

    /// Mean over tokens of `[word ; position]` for the oriented pair.
    fn pooled(&self, tokens: &[String], rows: &[Option<usize>], cats: &[PositionCategory]) -> Vec<f64> {
        let dw = self.config.word_dim;
        let mut x = vec![0.0; self.config.sentence_dim()];
        for ((tok, row), &cat) in tokens.iter().zip(rows).zip(cats) {
            let fallback;
            let w = match row {
                Some(i) => self.words.row(*i),
                None => {
                    fallback = hashed_embed(tok, dw);
                    &fallback
                }
            };
            for (xi, wi) in x[..dw].iter_mut().zip(w) {
                *xi += wi;
            }
            for (xi, pi) in x[dw..].iter_mut().zip(self.positions.row(cat)) {
                *xi += pi;
            }
        }
        let n = tokens.len().max(1) as f64;
        x.iter_mut().for_each(|v| *v /= n);
        x
    }

    pub fn forward(&self, input: &GraphInput, mode: Mode) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let d = cfg.state_dim;
        let entities = input.entities.len();
        if entities < 2 {
            return Err(ModelError::Config("need at least two entities".into()));
        }
        if entities > d {
            return Err(ModelError::Config(format!(
                "{entities} entities do not fit one-hot states of width {d}"
            )));
        }
        if input.tokens.is_empty() {
            return Err(ModelError::Config("sentence has no tokens".into()));
        }
        let pairs = ordered_pairs(entities);
        if input.symbolic.len() != pairs.len() {
            return Err(ModelError::Dimension {
                what: "symbolic encodings per pair".into(),
                expected: pairs.len(),
                found: input.symbolic.len(),
            });
        }
        for z in &input.symbolic {
            self.check_len("symbolic encoding", cfg.symbolic_dim, z.len())?;
        }
        let mut rng = match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Eval => None,
        };
        let p = cfg.dropout;

        let token_rows: Vec<Option<usize>> =
            input.tokens.iter().map(|t| self.words.row_of(t)).collect();
        let categories: Vec<Vec<PositionCategory>> = pairs
            .iter()
            .map(|&(s, o)| {
                (0..input.tokens.len())
                    .map(|t| position_category(t, input.entities[s], input.entities[o]))
                    .collect()
            })
            .collect();
        let pooled: Vec<Vec<f64>> = categories
            .iter()
            .map(|cats| self.pooled(&input.tokens, &token_rows, cats))
            .collect();

        let mut states = vec![(0..entities)
            .map(|v| {
                let mut h = vec![0.0; d];
                h[v] = 1.0;
                h
            })
            .collect::<Vec<_>>()];
        let mut sentence_caches = Vec::with_capacity(cfg.layers);
        let mut symbolic_caches = Vec::with_capacity(cfg.layers);
        let mut transitions = Vec::with_capacity(cfg.layers);
        let mut pre_activations = Vec::with_capacity(cfg.layers);
        for n in 0..cfg.layers {
            let mut sc = Vec::with_capacity(pairs.len());
            let mut yc = Vec::with_capacity(pairs.len());
            let mut tr = Vec::with_capacity(pairs.len());
            for (pi, z) in input.symbolic.iter().enumerate() {
                let (a, c1) = self.sentence_generators[n]
                    .forward(&pooled[pi], rng.as_mut().map(|r| (p, r)));
                let (sp, c2) = self.symbolic_generators[n].forward(z, rng.as_mut().map(|r| (p, r)));
                let m = a.iter().zip(&sp).map(|(x, y)| x + y).collect();
                sc.push(c1);
                yc.push(c2);
                tr.push(Transition { a, sp, m });
            }
            let ms: Vec<&[f64]> = tr.iter().map(|t| t.m.as_slice()).collect();
            let (next, pre) = propagate_with_pre(&pairs, &ms, &states[n], d);
            states.push(next);
            pre_activations.push(pre);
            sentence_caches.push(sc);
            symbolic_caches.push(yc);
            transitions.push(tr);
        }
        let features = pair_features(&states, 0, 1);
        let (logits, classifier_cache) =
            self.classifier.forward(&features, rng.as_mut().map(|r| (p, r)));
        Ok(ForwardTrace {
            pairs,
            token_rows,
            categories,
            sentence_caches,
            symbolic_caches,
            transitions,
            states,
            pre_activations,
            features,
            classifier_cache,
            logits,
        })
    }

    /// Reverse pass from `∂L/∂logits`, accumulating into `grad`.
    pub fn backward_into(&self, trace: &ForwardTrace, dlogits: &[f64], grad: &mut ModelState) {
        let cfg = &self.config;
        let d = cfg.state_dim;
        let k = cfg.layers;
        let entities = trace.states[0].len();

        let dfeatures = self
            .classifier
            .backward(&trace.classifier_cache, dlogits, &mut grad.classifier);
        // dstates[n][v], n in 0..=K
        let mut dstates = vec![vec![vec![0.0; d]; entities]; k + 1];
        for n in 1..=k {
            let block = &dfeatures[(n - 1) * d..n * d];
            for i in 0..d {
                dstates[n][0][i] += block[i] * trace.states[n][1][i];
                dstates[n][1][i] += block[i] * trace.states[n][0][i];
            }
        }
        let dw = cfg.word_dim;
        let tokens = trace.token_rows.len() as f64;
        for n in (0..k).rev() {
            for (pi, &(s, o)) in trace.pairs.iter().enumerate() {
                let u = &trace.pre_activations[n][pi];
                let du: Vec<f64> = (0..d)
                    .map(|i| if u[i] > 0.0 { dstates[n + 1][s][i] } else { 0.0 })
                    .collect();
                if du.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let m = &trace.transitions[n][pi].m;
                let h = &trace.states[n][o];
                let mut dm = vec![0.0; d * d];
                for i in 0..d {
                    if du[i] == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        dm[i * d + j] = du[i] * h[j];
                        dstates[n][o][j] += m[i * d + j] * du[i];
                    }
                }
                let dx = self.sentence_generators[n].backward(
                    &trace.sentence_caches[n][pi],
                    &dm,
                    &mut grad.sentence_generators[n],
                );
                self.symbolic_generators[n].backward(
                    &trace.symbolic_caches[n][pi],
                    &dm,
                    &mut grad.symbolic_generators[n],
                );
                for (t, row) in trace.token_rows.iter().enumerate() {
                    if let Some(r) = row {
                        let dst = &mut grad.words.data[r * dw..(r + 1) * dw];
                        for (g, x) in dst.iter_mut().zip(&dx[..dw]) {
                            *g += x / tokens;
                        }
                    }
                    let cat = trace.categories[pi][t] as usize;
                    let pd = cfg.position_dim;
                    let dst = &mut grad.positions.data[cat * pd..(cat + 1) * pd];
                    for (g, x) in dst.iter_mut().zip(&dx[dw..]) {
                        *g += x / tokens;
                    }
                }
            }
        }
    }

    /// Gradients of a loss whose logit gradient is `dlogits`. Fails if any
    /// gradient is non-finite.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[f64]) -> Result<ModelState> {
        let mut grad = self.zeros_like();
        self.backward_into(trace, dlogits, &mut grad);
        match grad.first_non_finite() {
            Some(name) => Err(ModelError::NonFinite(format!("gradient of {name}"))),
            None => Ok(grad),
        }
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            vocabulary: self.words.tokens.clone(),
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, shape, data)| NamedTensor {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuild from a checkpoint, validating every tensor shape against the
    /// stored configuration.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format `{}`", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        let cfg = ckpt.config;
        cfg.validate()?;
        struct Zero(usize);
        impl Embedder for Zero {
            fn dimension(&self) -> usize {
                self.0
            }
            fn embed(&self, _: &str) -> Vec<f64> {
                vec![0.0; self.0]
            }
        }
        let mut model = ModelState::new(cfg, &ckpt.vocabulary, &Zero(cfg.word_dim), 0)?;
        if model.words.len() != ckpt.vocabulary.len() {
            return Err(ModelError::Checkpoint("vocabulary has duplicate tokens".into()));
        }
        let expected: Vec<(String, Vec<usize>)> = model
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != ckpt.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                ckpt.tensors.len()
            )));
        }
        for (((name, shape), (_, dst)), t) in expected
            .into_iter()
            .zip(model.tensors_mut())
            .zip(&ckpt.tensors)
        {
            if t.name != name || t.shape != shape {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    t.name, t.shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{name}` has {} values for shape {shape:?}",
                    t.data.len()
                )));
            }
            dst.copy_from_slice(&t.data);
        }
        if let Some(name) = model.first_non_finite() {
            return Err(ModelError::NonFinite(name));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned dump of every parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<NamedTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::softmax;
    use crate::encoder::{encode_oriented, EmbeddingBackend};

    fn small_config(relations: usize) -> ModelConfig {
        ModelConfig {
            word_dim: 6,
            position_dim: 4,
            symbolic_dim: 8,
            state_dim: 3,
            layers: 2,
            hidden: 7,
            relations,
            dropout: 0.5,
        }
    }

    fn tokens(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn small_model(relations: usize, seed: u64) -> ModelState {
        let vocab = tokens("aspirin relieves headache in adults");
        let mut m =
            ModelState::new(small_config(relations), &vocab, &EmbeddingBackend::hashed(6), seed).unwrap();
        // keep classifier units away from the relu kink at zero features
        m.classifier.b1.iter_mut().for_each(|b| *b = 0.1);
        m
    }

    fn input(symbolic_scale: f64) -> GraphInput {
        GraphInput {
            tokens: tokens("aspirin relieves severe headache in adults"),
            entities: vec![Span::new(0, 1), Span::new(3, 4)],
            symbolic: vec![
                (0..8).map(|i| symbolic_scale * (i as f64 - 3.5) / 4.0).collect(),
                (0..8).map(|i| symbolic_scale * ((i * 3 % 8) as f64 - 3.0) / 5.0).collect(),
            ],
        }
    }

    #[test]
    fn zero_symbolic_input_leaves_m_equal_a() {
        let model = small_model(3, 1);
        let pooled = vec![0.3; 10];
        let t = model.generate_transitions(&pooled, &[0.0; 8], 0).unwrap();
        assert!(t.sp.iter().all(|&x| x == 0.0));
        assert_eq!(t.m, t.a);
        assert!(model.generate_transitions(&pooled, &[0.0; 7], 0).is_err());
        assert!(model.generate_transitions(&pooled, &[0.0; 8], 2).is_err());
    }

    #[test]
    fn bias_free_symbolic_generator_is_homogeneous() {
        let model = small_model(3, 2);
        let z: Vec<f64> = (0..8).map(|i| (i as f64 - 4.0) / 3.0).collect();
        let z2: Vec<f64> = z.iter().map(|x| 2.0 * x).collect();
        let t1 = model.generate_transitions(&[0.0; 10], &z, 1).unwrap();
        let t2 = model.generate_transitions(&[0.0; 10], &z2, 1).unwrap();
        for (a, b) in t1.sp.iter().zip(&t2.sp) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_set_transition_matches_arithmetic() {
        // d = 2, hidden = 2, identity-like weights on a 3-token sentence.
        let cfg = ModelConfig {
            word_dim: 1,
            position_dim: 1,
            symbolic_dim: 2,
            state_dim: 2,
            layers: 1,
            hidden: 2,
            relations: 2,
            dropout: 0.0,
        };
        let vocab = tokens("x y z");
        let mut model = ModelState::new(cfg, &vocab, &EmbeddingBackend::hashed(1), 0).unwrap();
        model.words.data = vec![1.0, 2.0, 3.0];
        model.positions.data = vec![10.0, 20.0, 0.0];
        let g = &mut model.sentence_generators[0];
        g.w1 = vec![1.0, 0.0, 0.0, 1.0];
        g.b1 = vec![0.0, -100.0];
        g.w2 = vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.5, 1.0];
        g.b2 = vec![0.0, 1.0, 0.0, 0.0];
        let s = &mut model.symbolic_generators[0];
        s.w1 = vec![1.0, 0.0, 0.0, 1.0];
        s.b1 = vec![0.0, 0.0];
        s.w2 = vec![1.0; 8];
        s.b2 = vec![0.0; 4];
        // head = token 0, tail = token 2
        let enc = encode_oriented(&vocab, Span::new(0, 1), Span::new(2, 3), &model.words, &model.positions);
        let pooled = enc.mean_pool();
        assert_eq!(pooled, vec![2.0, 10.0]);
        let t = model.generate_transitions(&pooled, &[1.0, -1.0], 0).unwrap();
        // hidden = relu([2, 10 - 100]) = [2, 0]
        assert_eq!(t.a, vec![2.0, 1.0, 4.0, 1.0]);
        // hidden = relu([1, -1]) = [1, 0]
        assert_eq!(t.sp, vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.m, vec![3.0, 2.0, 5.0, 2.0]);
    }

    #[test]
    fn propagation_examples() {
        let pairs = [(0, 1), (1, 0)];
        let zero = vec![0.0; 4];
        let states = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        let next = propagate(&pairs, &[&zero, &zero], &states, 2);
        assert_eq!(next, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);

        let identity = vec![1.0, 0.0, 0.0, 1.0];
        let states = vec![vec![0.0, 0.0], vec![1.0, 2.0]];
        let next = propagate(&[(0, 1)], &[&identity], &states, 2);
        assert_eq!(next[0], vec![1.0, 2.0]);
    }

    #[test]
    fn three_node_propagation_matches_term_by_term() {
        let pairs = ordered_pairs(3);
        assert_eq!(pairs.len(), 6);
        let ms: Vec<Vec<f64>> = (0..6)
            .map(|k| (0..4).map(|i| ((k * 4 + i) as f64 * 0.37).sin()).collect())
            .collect();
        let states = vec![vec![1.0, -0.5], vec![0.25, 2.0], vec![-1.0, 0.75]];
        let refs: Vec<&[f64]> = ms.iter().map(Vec::as_slice).collect();
        let next = propagate(&pairs, &refs, &states, 2);
        for s in 0..3 {
            let mut expected = [0.0f64; 2];
            for (k, &(ps, po)) in pairs.iter().enumerate() {
                if ps != s {
                    continue;
                }
                let m = &ms[k];
                let h = &states[po];
                expected[0] += (m[0] * h[0] + m[1] * h[1]).max(0.0);
                expected[1] += (m[2] * h[0] + m[3] * h[1]).max(0.0);
            }
            assert!((next[s][0] - expected[0]).abs() < 1e-15);
            assert!((next[s][1] - expected[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn classification_features() {
        let states = vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
        ];
        assert_eq!(pair_features(&states, 0, 1), vec![3.0, 8.0]);
        let cfg = ModelConfig {
            state_dim: 2,
            layers: 1,
            ..small_config(3)
        };
        let model = ModelState::new(cfg, &[], &EmbeddingBackend::hashed(6), 3).unwrap();
        let mut m = model.clone();
        m.classifier.b2 = vec![0.1, -0.2, 0.3];
        let zero_states = vec![states[0].clone(), vec![vec![0.0, 0.0], vec![3.0, 4.0]]];
        assert_eq!(m.classify(&zero_states, 0, 1), vec![0.1, -0.2, 0.3]);
    }

    /// Straight-line reimplementation of the eval-mode forward pass.
    fn oracle_logits(model: &ModelState, input: &GraphInput) -> Vec<f64> {
        let cfg = model.config;
        let d = cfg.state_dim;
        let mlp = |m: &Mlp, x: &[f64]| -> Vec<f64> {
            let h: Vec<f64> = (0..m.hidden)
                .map(|i| {
                    let mut z = m.b1[i];
                    for j in 0..m.input {
                        z += m.w1[i * m.input + j] * x[j];
                    }
                    z.max(0.0)
                })
                .collect();
            (0..m.output)
                .map(|o| {
                    let mut y = m.b2[o];
                    for i in 0..m.hidden {
                        y += m.w2[o * m.hidden + i] * h[i];
                    }
                    y
                })
                .collect()
        };
        let pairs = [(0usize, 1usize), (1, 0)];
        let mut h = vec![vec![0.0; d]; 2];
        h[0][0] = 1.0;
        h[1][1] = 1.0;
        let mut feats = Vec::new();
        for n in 0..cfg.layers {
            let mut next = vec![vec![0.0; d]; 2];
            for (pi, &(s, o)) in pairs.iter().enumerate() {
                let mut x = vec![0.0; cfg.word_dim + cfg.position_dim];
                for (t, tok) in input.tokens.iter().enumerate() {
                    let w = model.words.embed(tok);
                    let cat = if input.entities[s].contains(t) {
                        0
                    } else if input.entities[o].contains(t) {
                        1
                    } else {
                        2
                    };
                    for i in 0..cfg.word_dim {
                        x[i] += w[i] / input.tokens.len() as f64;
                    }
                    for i in 0..cfg.position_dim {
                        x[cfg.word_dim + i] +=
                            model.positions.data[cat * cfg.position_dim + i] / input.tokens.len() as f64;
                    }
                }
                let a = mlp(&model.sentence_generators[n], &x);
                let sp = mlp(&model.symbolic_generators[n], &input.symbolic[pi]);
                for i in 0..d {
                    let mut u = 0.0;
                    for j in 0..d {
                        u += (a[i * d + j] + sp[i * d + j]) * h[o][j];
                    }
                    next[s][i] += u.max(0.0);
                }
            }
            h = next;
            feats.extend((0..d).map(|i| h[0][i] * h[1][i]));
        }
        mlp(&model.classifier, &feats)
    }

    #[test]
    fn forward_matches_oracle() {
        for seed in 0..5 {
            let model = small_model(4, seed);
            let inp = input(1.0 + seed as f64);
            let trace = model.forward(&inp, Mode::Eval).unwrap();
            let oracle = oracle_logits(&model, &inp);
            for (a, b) in trace.logits.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_depends_on_seed() {
        let model = small_model(3, 9);
        let inp = input(1.0);
        let a = model.forward(&inp, Mode::Eval).unwrap().logits;
        let b = model.forward(&inp, Mode::Eval).unwrap().logits;
        assert_eq!(a, b);
        let t1 = model.forward(&inp, Mode::Train { seed: 5 }).unwrap().logits;
        let t2 = model.forward(&inp, Mode::Train { seed: 5 }).unwrap().logits;
        assert_eq!(t1, t2);
    }

    fn nll(model: &ModelState, inp: &GraphInput, gold: usize, mode: Mode) -> (f64, Vec<f64>, ForwardTrace) {
        let trace = model.forward(inp, mode).unwrap();
        let p = softmax(&trace.logits);
        let mut dl = p.clone();
        dl[gold] -= 1.0;
        (-p[gold].ln(), dl, trace)
    }

    #[test]
    fn single_relation_model_has_zero_gradients() {
        let model = small_model(1, 4);
        let (loss, dl, trace) = nll(&model, &input(1.0), 0, Mode::Eval);
        assert_eq!(loss, 0.0);
        let g = model.backward(&trace, &dl).unwrap();
        assert!(g.tensors().iter().all(|(_, _, t)| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn both_generators_receive_the_same_output_gradient() {
        let model = small_model(3, 4);
        let (_, dl, trace) = nll(&model, &input(0.8), 2, Mode::Eval);
        let g = model.backward(&trace, &dl).unwrap();
        for n in 0..2 {
            assert_eq!(g.sentence_generators[n].b2, g.symbolic_generators[n].b2);
        }
        assert!(g.sentence_generators[0].b2.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, mode) in [(10, Mode::Eval), (8, Mode::Train { seed: 77 })] {
            let model = small_model(3, seed);
            let inp = input(0.8);
            let gold = 1;
            let (_, dl, trace) = nll(&model, &inp, gold, mode);
            let g = model.backward(&trace, &dl).unwrap();
            let analytic: Vec<(String, Vec<f64>)> = g
                .tensors()
                .into_iter()
                .map(|(n, _, t)| (n, t.to_vec()))
                .collect();
            let eps = 1e-5;
            for (ti, (name, grad)) in analytic.iter().enumerate() {
                let mut worst: f64 = 0.0;
                let mut scale: f64 = 0.0;
                for i in 0..grad.len() {
                    let mut plus = model.clone();
                    plus.tensors_mut()[ti].1[i] += eps;
                    let mut minus = model.clone();
                    minus.tensors_mut()[ti].1[i] -= eps;
                    let fd = (nll(&plus, &inp, gold, mode).0 - nll(&minus, &inp, gold, mode).0) / (2.0 * eps);
                    worst = worst.max((fd - grad[i]).abs());
                    scale = scale.max(fd.abs()).max(grad[i].abs());
                }
                if scale > 0.0 {
                    assert!(worst / scale < 1e-4, "{name}: {worst} / {scale}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_shape_validation() {
        let model = small_model(3, 8);
        let ckpt = model.to_checkpoint();
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: ModelCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(ModelState::from_checkpoint(&back).unwrap(), model);

        let mut bad = ckpt.clone();
        bad.config.state_dim = 4;
        assert!(ModelState::from_checkpoint(&bad).is_err());
        let mut bad = ckpt.clone();
        bad.tensors[3].data.pop();
        assert!(ModelState::from_checkpoint(&bad).is_err());
        let mut bad = ckpt;
        bad.version = 99;
        assert!(ModelState::from_checkpoint(&bad).is_err());
    }

    #[test]
    fn too_many_entities_for_state_width() {
        let model = small_model(2, 1);
        let mut inp = input(1.0);
        inp.entities = vec![Span::new(0, 1), Span::new(1, 2), Span::new(2, 3), Span::new(3, 4)];
        inp.symbolic = vec![vec![0.0; 8]; 12];
        assert!(model.forward(&inp, Mode::Eval).is_err());
    }
}
