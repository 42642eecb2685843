use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;

use super::text::{char_len, tokenize};
use super::{Example, Task};
use crate::model::{PAD_ID, UNK_ID};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Dense token ids `0..V` with a `V×d_w` embedding table; ids 0 and 1 are
/// padding and the unknown token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    embeddings: Tensor,
}

impl Vocab {
    pub fn from_parts(tokens: Vec<String>, embeddings: Tensor) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Contract("vocabulary must start with <pad>, <unk>".into()));
        }
        let (rows, _) = embeddings.dims2()?;
        if rows != tokens.len() {
            return Err(Error::Dimension {
                op: "Vocab::from_parts",
                lhs: vec![tokens.len()],
                rhs: embeddings.shape().to_vec(),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Token ids of `text` after tokenisation.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(&t.text)).collect()
    }

    /// Tokenises an example into model input.
    pub fn instance(&self, ex: &Example) -> Result<Instance> {
        let nonempty = |what: &str, ids: Vec<usize>| -> Result<Vec<usize>> {
            if ids.is_empty() {
                Err(Error::CorruptExample {
                    id: ex.id.clone(),
                    message: format!("{what} has no tokens"),
                })
            } else {
                Ok(ids)
            }
        };
        let question = nonempty("question", self.encode(&ex.question))?;
        match ex.task {
            Task::Span => {
                ex.validate(None)?;
                let context = ex.context.as_deref().expect("validated");
                let start = ex.answer_start.expect("validated");
                let end = start + char_len(ex.answer_text.as_deref().expect("validated"));
                let toks = tokenize(context);
                let covered: Vec<usize> = toks
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.start < end && start < t.end)
                    .map(|(i, _)| i)
                    .collect();
                let (Some(&first), Some(&last)) = (covered.first(), covered.last()) else {
                    return Err(Error::CorruptExample {
                        id: ex.id.clone(),
                        message: "answer covers no context token".into(),
                    });
                };
                Ok(Instance::Span {
                    question,
                    context: toks.iter().map(|t| self.id(&t.text)).collect(),
                    gold: (first, last),
                })
            }
            Task::Select | Task::Classify => {
                ex.validate(None)?;
                let sentences = ex
                    .candidates()
                    .iter()
                    .enumerate()
                    .map(|(k, c)| nonempty(&format!("candidate {k}"), self.encode(c)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Instance::Sentences {
                    question,
                    sentences,
                    labels: ex.labels().to_vec(),
                    answerable: ex.is_answerable(),
                })
            }
        }
    }
}

/// Token-id view of an [`Example`].
#[derive(Debug, Clone, PartialEq)]
pub enum Instance {
    Span {
        question: Vec<usize>,
        context: Vec<usize>,
        /// Inclusive token span of the answer.
        gold: (usize, usize),
    },
    Sentences {
        question: Vec<usize>,
        sentences: Vec<Vec<usize>>,
        labels: Vec<usize>,
        answerable: bool,
    },
}

fn corpus_tokens(examples: &[Example]) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    let mut add = |text: &str| {
        for t in tokenize(text) {
            set.insert(t.text);
        }
    };
    for ex in examples {
        add(&ex.question);
        if let Some(c) = &ex.context {
            add(c);
        }
        for c in ex.candidates() {
            add(c);
        }
    }
    set
}

/// Builds the vocabulary from corpus tokens found in a text embeddings file
/// (`token v_1 … v_dw` per line). Returns the vocabulary and any warnings.
pub fn build_vocab(
    examples: &[Example],
    embeddings_path: impl AsRef<Path>,
    d_w: usize,
    seed: u64,
) -> Result<(Vocab, Vec<String>)> {
    let path = embeddings_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    build_vocab_from_str(examples, &text, d_w, seed, &path.display().to_string())
}

/// [`build_vocab`] over in-memory file contents; `source` prefixes locators.
pub fn build_vocab_from_str(
    examples: &[Example],
    text: &str,
    d_w: usize,
    seed: u64,
    source: &str,
) -> Result<(Vocab, Vec<String>)> {
    if d_w == 0 {
        return Err(Error::Usage("embedding dimension must be positive".into()));
    }
    let wanted = corpus_tokens(examples);
    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    let mut rows: Vec<f64> = vec![0.0; d_w];
    let mut unk_rng = rng::stream(seed, "vocab/unk");
    rows.extend((0..d_w).map(|_| unk_rng.gen_range(-0.1..=0.1)));

    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut warnings = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{source}:{}", n + 1);
        let mut parts = line.split(' ').filter(|p| !p.is_empty());
        let token = parts.next().expect("non-empty line");
        let values = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|e| Error::format(&loc, format!("bad real {p:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != d_w {
            return Err(Error::format(
                &loc,
                format!("expected {d_w} values for {token:?}, found {}", values.len()),
            ));
        }
        if let Some(first) = seen.get(token) {
            let msg = format!("{loc}: duplicate token {token:?}, keeping line {first}");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        seen.insert(token, n + 1);
        if wanted.contains(token) && token != PAD_TOKEN && token != UNK_TOKEN {
            tokens.push(token.to_string());
            rows.extend(values);
        }
    }
    let v = tokens.len();
    let vocab = Vocab::from_parts(tokens, Tensor::new(vec![v, d_w], rows)?)?;
    Ok((vocab, warnings))
}
