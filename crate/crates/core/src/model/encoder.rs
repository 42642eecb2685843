use super::{Graph, ModelConfig, UNK_EMBEDDING, UNK_ID, WORD_EMBEDDINGS};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Output of the shared modules for one (question, context) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedContext {
    /// `N×d`, one row per context token.
    pub h: Tensor,
    /// `M×N` context attention, each question row a distribution over the context.
    pub attention: Tensor,
}

/// Word vectors for `ids`: frozen rows are copied straight from the table and
/// unknown tokens read the trainable unk vector.
fn embed(g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Domain("cannot encode an empty token sequence".into()));
    }
    let table = g.params().expect(WORD_EMBEDDINGS);
    let (v, dw) = table.dims2()?;
    let mut rows = Vec::with_capacity(ids.len() * dw);
    for &id in ids {
        if id >= v {
            return Err(Error::OutOfVocab { id, size: v });
        }
        rows.extend_from_slice(table.row(id));
    }
    let base = g.tape.constant(Tensor::new(vec![ids.len(), dw], rows)?);
    let emb = if ids.contains(&UNK_ID) {
        let mask: Vec<f64> = ids.iter().map(|&id| f64::from(u8::from(id == UNK_ID))).collect();
        let mask = g.tape.constant(Tensor::new(vec![ids.len(), 1], mask)?);
        let unk = g.param(UNK_EMBEDDING);
        let unk_rows = g.tape.mul(mask, unk)?;
        g.tape.add(base, unk_rows)?
    } else {
        base
    };
    g.dropout(emb)
}

/// Single-direction GRU over the rows of `x`; returns `N×h` states in input order.
fn gru(g: &mut Graph<'_>, x: Var, prefix: &str, reverse: bool) -> Result<Var> {
    let w_ih = g.param(&format!("{prefix}.w_ih"));
    let w_hh = g.param(&format!("{prefix}.w_hh"));
    let b_ih = g.param(&format!("{prefix}.b_ih"));
    let b_hh = g.param(&format!("{prefix}.b_hh"));
    g.tape.gru(x, w_ih, w_hh, b_ih, b_hh, reverse)
}

/// The same recurrence spelled out in primitive tape ops; the fused node
/// is checked against it.
#[cfg(test)]
pub(crate) fn gru_composed(t: &mut Tape, x: Var, weights: [Var; 4], reverse: bool) -> Result<Var> {
    let [w_ih, w_hh, b_ih, b_hh] = weights;
    let h_dim = t.shape(w_hh)[0];
    let n = t.shape(x)[0];
    let xw = t.matmul(x, w_ih)?;
    let xw = t.add(xw, b_ih)?;
    let mut h = t.constant(Tensor::zeros(&[1, h_dim]));
    let mut states = vec![h; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for step in order {
        let xt = t.slice_rows(xw, step, 1)?;
        let hw = t.matmul(h, w_hh)?;
        let hw = t.add(hw, b_hh)?;
        let xz = t.slice_cols(xt, 0, h_dim)?;
        let xr = t.slice_cols(xt, h_dim, h_dim)?;
        let xn = t.slice_cols(xt, 2 * h_dim, h_dim)?;
        let hz = t.slice_cols(hw, 0, h_dim)?;
        let hr = t.slice_cols(hw, h_dim, h_dim)?;
        let hn = t.slice_cols(hw, 2 * h_dim, h_dim)?;
        let z = t.add(xz, hz)?;
        let z = t.sigmoid(z);
        let r = t.add(xr, hr)?;
        let r = t.sigmoid(r);
        let rn = t.mul(r, hn)?;
        let cand = t.add(xn, rn)?;
        let cand = t.tanh(cand);
        // h' = n + z ⊙ (h - n)
        let diff = t.sub(h, cand)?;
        let keep = t.mul(z, diff)?;
        h = t.add(cand, keep)?;
        states[step] = h;
    }
    t.vstack(&states)
}

fn bigru(g: &mut Graph<'_>, x: Var, layer: &str) -> Result<Var> {
    let fwd = gru(g, x, &format!("{layer}.fwd"), false)?;
    let bwd = gru(g, x, &format!("{layer}.bwd"), true)?;
    g.tape.concat(&[fwd, bwd])
}

/// `S[m][n] = w_u·u_m + w_h·h_n + (w_uh ⊙ u_m)·h_n`, i.e. a trainable vector
/// dotted with `[u_m; h_n; u_m ⊙ h_n]`. `h_ctx` is `N×d'`, `u_q` is `M×d'`,
/// `w_u`/`w_h` are `d'×1` and `w_uh` is `d'`.
pub fn similarity_matrix(tape: &mut Tape, h_ctx: Var, u_q: Var, w_u: Var, w_h: Var, w_uh: Var) -> Result<Var> {
    let (hs, us) = (tape.shape(h_ctx).to_vec(), tape.shape(u_q).to_vec());
    if hs.len() != 2 || us.len() != 2 || hs[1] != us[1] {
        return Err(Error::Dimension {
            op: "similarity_matrix",
            lhs: hs,
            rhs: us,
        });
    }
    let su = tape.matmul(u_q, w_u)?; // M×1
    let sh = tape.matmul(h_ctx, w_h)?; // N×1
    let sh = tape.transpose(sh)?; // 1×N
    let uw = tape.mul(u_q, w_uh)?; // M×d'
    let ht = tape.transpose(h_ctx)?;
    let cross = tape.matmul(uw, ht)?; // M×N
    let s = tape.add(cross, su)?;
    tape.add(s, sh)
}

/// Returns `(H, attention)`: the `N×d` modeling output and the `M×N`
/// row-softmax context attention.
pub(crate) fn encode(
    g: &mut Graph<'_>,
    config: &ModelConfig,
    question: &[usize],
    context: &[usize],
) -> Result<(Var, Var)> {
    debug_assert_eq!(config.hidden % 2, 0);
    let u = encode_question(g, question)?;
    encode_against(g, u, context)
}

/// Contextual question vectors `U` (`M×d`).
pub(crate) fn encode_question(g: &mut Graph<'_>, question: &[usize]) -> Result<Var> {
    let qe = embed(g, question)?;
    bigru(g, qe, "encoder")
}

/// [`encode`] with the question already encoded, so several contexts can
/// share one question pass.
pub(crate) fn encode_against(g: &mut Graph<'_>, u: Var, context: &[usize]) -> Result<(Var, Var)> {
    let ce = embed(g, context)?;
    let h = bigru(g, ce, "encoder")?;

    let w_u = g.param("attention.w_u");
    let w_h = g.param("attention.w_h");
    let w_uh = g.param("attention.w_uh");
    let t = &mut g.tape;
    let s = similarity_matrix(t, h, u, w_u, w_h, w_uh)?;
    let att = t.softmax(s, 1)?;

    // per-context-token question summary
    let att_t = t.transpose(att)?;
    let u_tilde = t.matmul(att_t, u)?; // N×d
                                       // context summary weighted by each token's best question match
    let colmax = t.reduce_max(s)?; // N
    let b = t.softmax(colmax, 0)?;
    let n = context.len();
    let b = t.reshape(b, &[1, n])?;
    let h_tilde = t.matmul(b, h)?; // 1×d

    let hu = t.mul(h, u_tilde)?;
    let hh = t.mul(h, h_tilde)?;
    let gmat = t.concat(&[h, u_tilde, hu, hh])?;
    let gmat = g.dropout(gmat)?;
    let out = bigru(g, gmat, "modeling")?;
    Ok((out, att))
}
