//! Attention reader with a span head and a max-pool sentence classifier.
//!
//! Both model kinds share everything below the answer module: frozen word
//! embeddings with a trainable unknown-token row, a bidirectional GRU over
//! question and context, bidirectional attention, and a bidirectional GRU
//! modeling layer that yields one `d`-wide vector per context token. Only the
//! `answer.*` parameters differ between the kinds.

pub(crate) mod encoder;
mod graph;
pub(crate) mod heads;

pub use encoder::{similarity_matrix, EncodedContext};
pub use graph::Graph;
pub use heads::{max_pool_head, select_span, SpanPrediction};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Path prefix of the answer module; everything else is shared.
pub const ANSWER_PREFIX: &str = "answer.";
/// Pretrained word vectors; never updated by the optimizer.
pub const WORD_EMBEDDINGS: &str = "embedding.words";
pub const UNK_EMBEDDING: &str = "embedding.unk";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    /// Width `d` of the per-token vectors fed to the answer module; each
    /// recurrent direction has `d / 2` units.
    pub hidden: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub keep_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 100,
            hidden: 200,
            num_classes: 2,
            vocab_size: 2,
            keep_prob: 0.8,
        }
    }
}

impl ModelConfig {
    pub fn encoder_hidden(&self) -> usize {
        self.hidden / 2
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Usage(format!(
                "hidden must be an even number >= 2, got {}",
                self.hidden
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Usage("embedding_dim must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Usage("vocabulary needs at least pad and unk".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Usage(format!(
                "keep_prob must lie in (0, 1], got {}",
                self.keep_prob
            )));
        }
        if kind == ModelKind::Classify && self.num_classes < 2 {
            return Err(Error::Usage(format!(
                "classification head needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Digest of the fields that fix the shapes of the shared modules.
    pub fn shared_digest(&self) -> String {
        let canon = format!(
            "embedding_dim={};hidden={};vocab_size={}",
            self.embedding_dim, self.hidden, self.vocab_size
        );
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Span,
    Classify,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Span => "span",
            ModelKind::Classify => "classify",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span" => Ok(ModelKind::Span),
            "classify" => Ok(ModelKind::Classify),
            other => Err(Error::Usage(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Parameters keyed by dotted path, iterated in path order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.entries.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path)
    }

    pub(crate) fn expect(&self, path: &str) -> &Tensor {
        self.entries
            .get(path)
            .unwrap_or_else(|| panic!("missing parameter {path}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.numel())
            .sum()
    }
}

pub fn is_answer_path(path: &str) -> bool {
    path.starts_with(ANSWER_PREFIX)
}

pub fn is_trainable(path: &str) -> bool {
    path != WORD_EMBEDDINGS
}

/// Canonical parameter layout `(path, shape)` for a model kind.
pub fn param_layout(config: &ModelConfig, kind: ModelKind) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden;
    let he = config.encoder_hidden();
    let mut out = vec![
        (
            WORD_EMBEDDINGS.to_string(),
            vec![config.vocab_size, config.embedding_dim],
        ),
        (UNK_EMBEDDING.to_string(), vec![config.embedding_dim]),
        ("attention.w_u".to_string(), vec![d, 1]),
        ("attention.w_h".to_string(), vec![d, 1]),
        ("attention.w_uh".to_string(), vec![d]),
    ];
    for (layer, input) in [("encoder", config.embedding_dim), ("modeling", 4 * d)] {
        for dir in ["fwd", "bwd"] {
            let p = format!("{layer}.{dir}");
            out.push((format!("{p}.w_ih"), vec![input, 3 * he]));
            out.push((format!("{p}.w_hh"), vec![he, 3 * he]));
            out.push((format!("{p}.b_ih"), vec![3 * he]));
            out.push((format!("{p}.b_hh"), vec![3 * he]));
        }
    }
    out.extend(answer_layout(config, kind));
    out.sort();
    out
}

pub fn answer_layout(config: &ModelConfig, kind: ModelKind) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden;
    match kind {
        ModelKind::Span => vec![
            ("answer.end".to_string(), vec![d, 1]),
            ("answer.start".to_string(), vec![d, 1]),
        ],
        ModelKind::Classify => vec![
            ("answer.b".to_string(), vec![config.num_classes]),
            ("answer.w".to_string(), vec![config.num_classes, d]),
        ],
    }
}

/// Uniform `±bound` tensor drawn from the stream `"{stream}/{path}"`.
pub(crate) fn uniform_init(seed: u64, stream: &str, path: &str, shape: &[usize], bound: f64) -> Tensor {
    let mut rng = rng::stream(seed, &format!("{stream}/{path}"));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn init_bound(path: &str, config: &ModelConfig) -> f64 {
    let d = config.hidden as f64;
    if path.starts_with("attention.") {
        1.0 / (3.0 * d).sqrt()
    } else if is_answer_path(path) {
        1.0 / d.sqrt()
    } else {
        1.0 / (config.encoder_hidden() as f64).sqrt()
    }
}

/// Fresh answer-module parameters, uniform in `±1/√d`.
pub fn init_answer(config: &ModelConfig, kind: ModelKind, seed: u64, stream: &str) -> ParamStore {
    let mut params = ParamStore::new();
    let bound = 1.0 / (config.hidden as f64).sqrt();
    for (path, shape) in answer_layout(config, kind) {
        let t = uniform_init(seed, stream, &path, &shape, bound);
        params.insert(path, t);
    }
    params
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub params: ParamStore,
}

impl Model {
    /// Random initialisation around a `V×d_w` embedding table. Row
    /// [`UNK_ID`] of the table seeds the trainable unknown-token vector and is
    /// zeroed in the frozen table.
    pub fn init(config: ModelConfig, kind: ModelKind, embeddings: &Tensor, seed: u64) -> Result<Self> {
        config.validate(kind)?;
        let expected = [config.vocab_size, config.embedding_dim];
        if embeddings.shape() != expected {
            return Err(Error::Dimension {
                op: "Model::init",
                lhs: expected.to_vec(),
                rhs: embeddings.shape().to_vec(),
            });
        }
        let mut params = ParamStore::new();
        for (path, shape) in param_layout(&config, kind) {
            let value = match path.as_str() {
                WORD_EMBEDDINGS => {
                    let mut t = embeddings.clone();
                    let dw = config.embedding_dim;
                    t.data_mut()[UNK_ID * dw..(UNK_ID + 1) * dw].fill(0.0);
                    t
                }
                UNK_EMBEDDING => Tensor::from_parts(shape, embeddings.row(UNK_ID).to_vec()),
                _ => {
                    let bound = init_bound(&path, &config);
                    uniform_init(seed, "init", &path, &shape, bound)
                }
            };
            params.insert(path, value);
        }
        Ok(Self { config, kind, params })
    }

    /// Wraps existing parameters, checking them against the canonical layout.
    pub fn from_params(config: ModelConfig, kind: ModelKind, params: ParamStore) -> Result<Self> {
        config.validate(kind)?;
        let layout = param_layout(&config, kind);
        let mut problems = Vec::new();
        for (path, shape) in &layout {
            match params.get(path) {
                None => problems.push(format!("{path}: missing")),
                Some(t) if t.shape() != shape.as_slice() => {
                    problems.push(format!("{path}: expected {shape:?}, found {:?}", t.shape()))
                }
                Some(_) => {}
            }
        }
        for path in params.paths() {
            if !layout.iter().any(|(p, _)| p == path) {
                problems.push(format!("{path}: unexpected"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Incompatible(problems));
        }
        Ok(Self { config, kind, params })
    }

    /// Encodes one (question, context) pair at inference.
    pub fn encode_pair(&self, question: &[usize], context: &[usize]) -> Result<EncodedContext> {
        let mut g = Graph::inference(&self.params);
        let (h, att) = encoder::encode(&mut g, &self.config, question, context)?;
        Ok(EncodedContext {
            h: g.tape.value(h).clone(),
            attention: g.tape.value(att).clone(),
        })
    }

    pub fn predict_span(&self, question: &[usize], context: &[usize]) -> Result<SpanPrediction> {
        self.require(ModelKind::Span)?;
        let mut g = Graph::inference(&self.params);
        let (h, _) = encoder::encode(&mut g, &self.config, question, context)?;
        let (ps, pe) = heads::span_head(&mut g, h)?;
        SpanPrediction::from_distributions(g.tape.value(ps).data().to_vec(), g.tape.value(pe).data().to_vec())
    }

    /// One `C`-way distribution per sentence, each sentence encoded
    /// independently against the question (the question pass is shared).
    pub fn classify_sentences(&self, question: &[usize], sentences: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.require(ModelKind::Classify)?;
        if sentences.is_empty() {
            return Err(Error::Domain("classify_sentences needs at least one sentence".into()));
        }
        let mut g = Graph::inference(&self.params);
        let probs = heads::classify_all(&mut g, question, sentences)?;
        Ok(probs.iter().map(|&p| g.tape.value(p).data().to_vec()).collect())
    }

    /// Entailment as single-sentence classification: the hypothesis plays the
    /// question and the premise the only sentence.
    pub fn classify_rte(&self, premise: &[usize], hypothesis: &[usize]) -> Result<Vec<f64>> {
        if self.config.num_classes != 3 {
            return Err(Error::Usage(format!(
                "entailment needs a 3-class head, model has {}",
                self.config.num_classes
            )));
        }
        let mut out = self.classify_sentences(hypothesis, &[premise.to_vec()])?;
        Ok(out.remove(0))
    }

    fn require(&self, kind: ModelKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "operation needs a {kind} model, this one is {}",
                self.kind
            )))
        }
    }
}
