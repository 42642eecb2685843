//! Canonical examples, format loaders, span→sentence conversion, vocabulary,
//! and the synthetic corpus used for desk-scale experiments.

mod convert;
mod loaders;
mod synthetic;
mod text;
mod vocab;

pub use convert::{convert_squad_to_squadt, ConversionRecord};
pub use loaders::{load_dataset, parse_dataset, save_canonical, write_canonical, DatasetFormat};
pub use synthetic::{generate_synthetic_corpus, synthetic_embeddings, SyntheticCorpus, VocabSpec};
pub use text::{char_len, char_slice, split_sentences, tokenize, SentenceSpan, Token};
pub use vocab::{build_vocab, build_vocab_from_str, Instance, Vocab, PAD_TOKEN, UNK_TOKEN};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Span,
    Select,
    Classify,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Span => "span",
            Task::Select => "select",
            Task::Classify => "classify",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span" => Ok(Task::Span),
            "select" => Ok(Task::Select),
            "classify" => Ok(Task::Classify),
            other => Err(Error::Usage(format!("unknown task {other:?}"))),
        }
    }
}

/// Entailment classes in label-index order.
pub const RTE_LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];

/// One task instance in the canonical interchange schema. Char offsets count
/// Unicode scalar values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub task: Task,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answerable: Option<bool>,
}

impl Example {
    pub fn span(
        id: impl Into<String>,
        question: impl Into<String>,
        context: impl Into<String>,
        answer_start: usize,
        answer_text: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            task: Task::Span,
            question: question.into(),
            context: Some(context.into()),
            answer_start: Some(answer_start),
            answer_text: Some(answer_text.into()),
            candidates: None,
            labels: None,
            answerable: None,
        }
    }

    /// Binary sentence selection; `answerable` is derived from the labels.
    pub fn select(
        id: impl Into<String>,
        question: impl Into<String>,
        candidates: Vec<String>,
        labels: Vec<usize>,
    ) -> Self {
        let answerable = labels.contains(&1);
        Self {
            id: id.into(),
            task: Task::Select,
            question: question.into(),
            context: None,
            answer_start: None,
            answer_text: None,
            candidates: Some(candidates),
            labels: Some(labels),
            answerable: Some(answerable),
        }
    }

    pub fn classify(
        id: impl Into<String>,
        question: impl Into<String>,
        candidates: Vec<String>,
        labels: Vec<usize>,
    ) -> Self {
        Self {
            id: id.into(),
            task: Task::Classify,
            question: question.into(),
            context: None,
            answer_start: None,
            answer_text: None,
            candidates: Some(candidates),
            labels: Some(labels),
            answerable: None,
        }
    }

    /// Select queries with no relevant candidate are kept but not scored.
    pub fn is_answerable(&self) -> bool {
        match self.task {
            Task::Select => self
                .answerable
                .unwrap_or_else(|| self.labels.as_ref().is_some_and(|l| l.contains(&1))),
            _ => true,
        }
    }

    pub fn candidates(&self) -> &[String] {
        self.candidates.as_deref().unwrap_or(&[])
    }

    pub fn labels(&self) -> &[usize] {
        self.labels.as_deref().unwrap_or(&[])
    }

    /// Checks the task-specific invariants. `num_classes` bounds classify labels.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let corrupt = |message: String| Error::CorruptExample {
            id: self.id.clone(),
            message,
        };
        match self.task {
            Task::Span => {
                let (Some(context), Some(start), Some(answer)) = (&self.context, self.answer_start, &self.answer_text)
                else {
                    return Err(corrupt(
                        "span example needs context, answer_start and answer_text".into(),
                    ));
                };
                if answer.is_empty() {
                    return Err(corrupt("empty answer text".into()));
                }
                let end = start + char_len(answer);
                if end > char_len(context) {
                    return Err(corrupt(format!(
                        "answer span {start}..{end} lies outside a context of {} chars",
                        char_len(context)
                    )));
                }
                if char_slice(context, start, end) != *answer {
                    return Err(corrupt(format!(
                        "context at {start}..{end} does not match the answer text"
                    )));
                }
            }
            Task::Select | Task::Classify => {
                let (Some(cands), Some(labels)) = (&self.candidates, &self.labels) else {
                    return Err(corrupt("needs candidates and labels".into()));
                };
                if cands.is_empty() {
                    return Err(corrupt("no candidates".into()));
                }
                if cands.len() != labels.len() {
                    return Err(corrupt(format!(
                        "{} candidates but {} labels",
                        cands.len(),
                        labels.len()
                    )));
                }
                let bound = match self.task {
                    Task::Select => 2,
                    _ => num_classes.unwrap_or(usize::MAX),
                };
                if let Some(bad) = labels.iter().find(|&&l| l >= bound) {
                    return Err(corrupt(format!("label {bad} out of range for {bound} classes")));
                }
            }
        }
        Ok(())
    }
}
