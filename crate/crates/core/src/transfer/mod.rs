//! Checkpoints, span→classification weight transfer, and ensembles.

mod checkpoint;

pub use checkpoint::{load_checkpoint, round_f32, save_checkpoint, Checkpoint, MAGIC, VERSION};

use crate::model::{init_answer, is_answer_path, param_layout, Model, ModelConfig, ModelKind, ParamStore};
use crate::{Error, Result};

/// Target parameters for `target_kind`: every non-answer path is copied
/// from `source`; the answer module is freshly drawn (uniform `±1/√d`)
/// from the `"transfer"` stream of `seed`.
pub fn transfer_weights(
    source: &Checkpoint,
    target_kind: ModelKind,
    target_config: &ModelConfig,
    seed: u64,
) -> Result<Model> {
    target_config.validate(target_kind)?;
    let src = source.config()?;
    let mut problems = Vec::new();
    let pairs = [
        ("embedding_dim", src.embedding_dim, target_config.embedding_dim),
        ("hidden", src.hidden, target_config.hidden),
        ("vocab_size", src.vocab_size, target_config.vocab_size),
    ];
    for (name, a, b) in pairs {
        if a != b {
            problems.push(format!("{name}: source {a}, target {b}"));
        }
    }
    if problems.is_empty() && src.shared_digest() != target_config.shared_digest() {
        problems.push("shared configuration digest differs".into());
    }

    let mut params = ParamStore::new();
    for (path, shape) in param_layout(target_config, target_kind) {
        if is_answer_path(&path) {
            continue;
        }
        match source.params.get(&path) {
            None => problems.push(format!("{path}: missing from source")),
            Some(t) if t.shape() != shape.as_slice() => {
                problems.push(format!("{path}: source {:?}, target {shape:?}", t.shape()))
            }
            Some(t) => params.insert(path, t.clone()),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Incompatible(problems));
    }
    for (path, t) in init_answer(target_config, target_kind, seed, "transfer").iter() {
        params.insert(path, t.clone());
    }
    Model::from_params(target_config.clone(), target_kind, params)
}

/// Coordinate-wise arithmetic mean of `k ≥ 1` distributions over the same
/// `C` classes.
pub fn ensemble_predict(prob_vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = prob_vectors.first().ok_or(Error::EmptySequence("ensemble_predict"))?;
    let c = first.len();
    for p in prob_vectors {
        if p.len() != c {
            return Err(Error::Dimension {
                op: "ensemble_predict",
                lhs: vec![c],
                rhs: vec![p.len()],
            });
        }
        let sum: f64 = p.iter().sum();
        if c == 0 || p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("not a distribution: {p:?}")));
        }
    }
    // running mean: identical members reproduce their vector exactly
    let mut mean = first.clone();
    for (k, p) in prob_vectors.iter().enumerate().skip(1) {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += (v - *m) / (k + 1) as f64;
        }
    }
    Ok(mean)
}

/// Per-sentence mean distribution of several classification models.
pub fn ensemble_sentences(models: &[Model], question: &[usize], sentences: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    if models.is_empty() {
        return Err(Error::EmptySequence("ensemble_sentences"));
    }
    let outputs = models
        .iter()
        .map(|m| m.classify_sentences(question, sentences))
        .collect::<Result<Vec<_>>>()?;
    (0..sentences.len())
        .map(|s| {
            let members: Vec<Vec<f64>> = outputs.iter().map(|o| o[s].clone()).collect();
            ensemble_predict(&members)
        })
        .collect()
}
