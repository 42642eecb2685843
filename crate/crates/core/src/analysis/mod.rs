//! Attention-map export and sparsity statistics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::datasets::{tokenize, Example, Vocab};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Default sparsity threshold.
pub const EPSILON: f64 = 0.01;

/// Question-by-context attention weights with the surface tokens on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub question: Vec<String>,
    pub context: Vec<String>,
    /// `M×N`, each row a distribution over the context.
    pub weights: Tensor,
}

impl AttentionMap {
    pub fn new(question: Vec<String>, context: Vec<String>, weights: Tensor) -> Result<Self> {
        let (m, n) = weights.dims2()?;
        if m != question.len() || n != context.len() {
            return Err(Error::Dimension {
                op: "AttentionMap::new",
                lhs: vec![question.len(), context.len()],
                rhs: vec![m, n],
            });
        }
        if weights.data().iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Domain("attention weights must lie in [0, 1]".into()));
        }
        for (i, row) in weights.rows().iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!("attention row {i} sums to {s}")));
            }
        }
        Ok(Self {
            question,
            context,
            weights,
        })
    }

    pub fn sparsity(&self, epsilon: f64) -> Result<f64> {
        sparsity(self.weights.data(), epsilon)
    }

    /// Header row of context tokens after an empty corner cell; one row per
    /// question token; weights with six decimals.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Contract(format!("csv encoding failed: {e}"));
        let mut header = vec![String::new()];
        header.extend(self.context.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (tok, row) in self.question.iter().zip(self.weights.rows()) {
            let mut rec = vec![tok.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Contract(format!("csv flush failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
    }
}

/// Fraction of values `≤ epsilon`.
pub fn sparsity(values: &[f64], epsilon: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySequence("sparsity"));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Domain(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    let small = values.iter().filter(|&&v| v <= epsilon).count();
    Ok(small as f64 / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `n_bins + 1` edges from 0 to 1.
    pub bins: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
}

/// Equal-width bins over `[0, 1]`; every bin is `[lo, hi)` except the last,
/// which also holds 1.0.
pub fn sparsity_histogram(values: &[f64], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::Usage("histogram needs at least one bin".into()));
    }
    if values.is_empty() {
        return Err(Error::EmptySequence("sparsity_histogram"));
    }
    let mut counts = vec![0; n_bins];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("sparsity value {v} outside [0, 1]")));
        }
        let idx = ((v * n_bins as f64) as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram {
        bins: (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect(),
        counts,
        mean: values.iter().sum::<f64>() / values.len() as f64,
    })
}

/// One map per candidate sentence of a selection example.
pub fn attention_maps(model: &Model, vocab: &Vocab, example: &Example) -> Result<Vec<AttentionMap>> {
    if example.candidates().is_empty() {
        return Err(Error::Usage(format!(
            "example {} has no candidate sentences",
            example.id
        )));
    }
    let surface = |text: &str| -> Vec<String> { tokenize(text).into_iter().map(|t| t.text).collect() };
    let q_ids = vocab.encode(&example.question);
    example
        .candidates()
        .iter()
        .map(|sentence| {
            let enc = model.encode_pair(&q_ids, &vocab.encode(sentence))?;
            AttentionMap::new(surface(&example.question), surface(sentence), enc.attention)
        })
        .collect()
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `{id}-{k}.csv` into `dir` for every candidate `k`; returns the
/// paths alongside the maps.
pub fn dump_attention(
    model: &Model,
    vocab: &Vocab,
    example: &Example,
    dir: impl AsRef<Path>,
) -> Result<Vec<(PathBuf, AttentionMap)>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = file_stem(&example.id);
    attention_maps(model, vocab, example)?
        .into_iter()
        .enumerate()
        .map(|(k, map)| {
            let path = dir.join(format!("{stem}-{k}.csv"));
            fs::write(&path, map.to_csv()?).map_err(|e| Error::io(&path, e))?;
            Ok((path, map))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity(&[0.0; 9], EPSILON).unwrap(), 1.0);
        assert_eq!(sparsity(&[0.005, 0.995, 0.5, 0.5], EPSILON).unwrap(), 0.25);
        let uniform = AttentionMap::new(
            tokens(&["q"]),
            tokens(&["a", "b", "c", "d"]),
            Tensor::filled(&[1, 4], 0.25),
        )
        .unwrap();
        assert_eq!(uniform.sparsity(EPSILON).unwrap(), 0.0);
        assert_eq!(sparsity(&[0.01], EPSILON).unwrap(), 1.0);
        assert!(sparsity(&[], EPSILON).is_err());
        assert!(sparsity(&[0.5], 1.0).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = sparsity_histogram(&[0.05, 0.95], 2).unwrap();
        assert_eq!(h.counts, [1, 1]);
        assert_eq!(h.mean, 0.5);
        assert_eq!(h.bins, [0.0, 0.5, 1.0]);
        let h = sparsity_histogram(&[1.0], 10).unwrap();
        assert_eq!(h.counts[9], 1);
        assert_eq!(h.bins.len(), 11);
        assert!(matches!(sparsity_histogram(&[1.2], 3), Err(Error::Domain(_))));
        assert!(sparsity_histogram(&[0.2], 0).is_err());
    }

    #[test]
    fn cohort_means_compare() {
        // two cohorts of maps, compared through their mean sparsity
        let sharp = [0.9, 0.8, 0.82];
        let flat = [0.5, 0.6, 0.58];
        let a = sparsity_histogram(&sharp, 10).unwrap();
        let b = sparsity_histogram(&flat, 10).unwrap();
        assert!((a.mean - 0.84).abs() < 1e-12);
        assert!((b.mean - 0.56).abs() < 1e-12);
        assert!(a.mean > b.mean);
    }

    #[test]
    fn map_validation() {
        assert!(AttentionMap::new(tokens(&["q"]), tokens(&["a"]), Tensor::filled(&[1, 1], 0.5)).is_err());
        assert!(AttentionMap::new(tokens(&["q", "r"]), tokens(&["a"]), Tensor::filled(&[1, 1], 1.0)).is_err());
    }

    #[test]
    fn csv_layout() {
        let w = Tensor::from_rows(&[[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]]).unwrap();
        let map = AttentionMap::new(tokens(&["who", "?"]), tokens(&["a", "b,c", "d"]), w).unwrap();
        let csv = map.to_csv().unwrap();
        assert_eq!(
            csv,
            ",a,\"b,c\",d\nwho,0.200000,0.300000,0.500000\n?,1.000000,0.000000,0.000000\n"
        );
        let one = AttentionMap::new(tokens(&["q"]), tokens(&["c"]), Tensor::filled(&[1, 1], 1.0)).unwrap();
        assert_eq!(one.to_csv().unwrap(), ",c\nq,1.000000\n");
    }
}
