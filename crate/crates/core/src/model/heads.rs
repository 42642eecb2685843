use super::{encoder, Graph, ModelConfig};
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpanPrediction {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    /// Inclusive token span `(start, end)` with `start <= end`.
    pub best: (usize, usize),
    pub score: f64,
}

impl SpanPrediction {
    pub fn from_distributions(p_start: Vec<f64>, p_end: Vec<f64>) -> Result<Self> {
        let (i, j) = select_span(&p_start, &p_end)?;
        let score = p_start[i] * p_end[j];
        Ok(Self {
            p_start,
            p_end,
            best: (i, j),
            score,
        })
    }
}

/// Maximises `p_start[i] * p_end[j]` over `i <= j` by a full scan of the
/// upper triangle. Ties go to the smallest `i`, then the smallest `j`.
pub fn select_span(p_start: &[f64], p_end: &[f64]) -> Result<(usize, usize)> {
    if p_start.len() != p_end.len() {
        return Err(Error::Dimension {
            op: "select_span",
            lhs: vec![p_start.len()],
            rhs: vec![p_end.len()],
        });
    }
    if p_start.is_empty() {
        return Err(Error::EmptySequence("select_span"));
    }
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for (i, &ps) in p_start.iter().enumerate() {
        for (j, &pe) in p_end.iter().enumerate().skip(i) {
            let score = ps * pe;
            if score > best_score {
                best_score = score;
                best = (i, j);
            }
        }
    }
    Ok(best)
}

/// Start and end position distributions over the rows of `h` (`N×d`).
pub(crate) fn span_head(g: &mut Graph<'_>, h: Var) -> Result<(Var, Var)> {
    let n = g.tape.shape(h)[0];
    let w_start = g.param("answer.start");
    let w_end = g.param("answer.end");
    let t = &mut g.tape;
    let ls = t.matmul(h, w_start)?;
    let ls = t.reshape(ls, &[n])?;
    let le = t.matmul(h, w_end)?;
    let le = t.reshape(le, &[n])?;
    Ok((t.softmax(ls, 0)?, t.softmax(le, 0)?))
}

/// `softmax(W · max(h_1, …, h_N) + b)` with the max taken per coordinate.
/// `h_seq` is `N×d`, `w` is `C×d`, `b` is `C`; returns a length-`C` distribution.
pub fn max_pool_head(tape: &mut Tape, h_seq: Var, w: Var, b: Var) -> Result<Var> {
    let pooled = tape.reduce_max(h_seq)?;
    let d = tape.shape(pooled)[0];
    let pooled = tape.reshape(pooled, &[d, 1])?;
    let logits = tape.matmul(w, pooled)?;
    let c = tape.shape(logits)[0];
    let logits = tape.reshape(logits, &[c])?;
    let logits = tape.add(logits, b)?;
    tape.softmax(logits, 0)
}

/// Class distributions for each sentence against one question encoding.
pub(crate) fn classify_all(g: &mut Graph<'_>, question: &[usize], sentences: &[Vec<usize>]) -> Result<Vec<Var>> {
    let u = encoder::encode_question(g, question)?;
    let w = g.param("answer.w");
    let b = g.param("answer.b");
    sentences
        .iter()
        .map(|s| {
            let (h, _) = encoder::encode_against(g, u, s)?;
            max_pool_head(&mut g.tape, h, w, b)
        })
        .collect()
}

pub(crate) fn span_distributions(
    g: &mut Graph<'_>,
    config: &ModelConfig,
    question: &[usize],
    context: &[usize],
) -> Result<(Var, Var)> {
    let (h, _) = encoder::encode(g, config, question, context)?;
    span_head(g, h)
}
