//! Independent reference implementations checked against the library. Each
//! suite returns a one-line summary on success and the first mismatch on
//! failure.

use qtl_core::analysis::{sparsity, EPSILON};
use qtl_core::datasets::{
    char_len, char_slice, convert_squad_to_squadt, generate_synthetic_corpus, split_sentences, Example, VocabSpec,
};
use qtl_core::evaluation::{compute_ranking_metrics, mann_whitney_u, RankedQuery};
use qtl_core::model::{
    answer_layout, is_answer_path, max_pool_head, select_span, Model, ModelConfig, ModelKind, ParamStore,
};
use qtl_core::tensor::{Tape, Tensor};
use qtl_core::training::{adadelta_step, ema_update, Gradients, OptimizerState};
use qtl_core::transfer::{transfer_weights, Checkpoint};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probabilities on a coarse grid so ties are common.
fn coarse_distribution(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(1..=6) as f64).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn brute_span(ps: &[f64], pe: &[f64]) -> (usize, usize) {
    let pairs = || (0..ps.len()).flat_map(|i| (i..pe.len()).map(move |j| (i, j)));
    let best = pairs().map(|(i, j)| ps[i] * pe[j]).fold(f64::NEG_INFINITY, f64::max);
    if let Some(found) = pairs().find(|&(i, j)| ps[i] * pe[j] == best) {
        return found;
    }
    unreachable!("non-empty input")
}

pub fn select_span_vs_brute_force(cases: usize) -> Outcome {
    let mut r = rng(11);
    for case in 0..cases {
        let n = r.gen_range(1..=30);
        let (ps, pe) = if case % 2 == 0 {
            (coarse_distribution(&mut r, n), coarse_distribution(&mut r, n))
        } else {
            let a: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
            let b: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
            (a, b)
        };
        let got = select_span(&ps, &pe).map_err(|e| e.to_string())?;
        let want = brute_span(&ps, &pe);
        if got != want {
            return Err(format!("case {case}: select_span {got:?}, brute force {want:?}"));
        }
    }
    Ok(format!("{cases} cases, exact match"))
}

/// Ranks from their definition: candidates ahead are those with a higher
/// score or an equal score and a lower index.
fn reference_metrics(probs: &[f64], labels: &[usize]) -> [f64; 4] {
    let n = probs.len();
    let rank: Vec<usize> = (0..n)
        .map(|i| {
            1 + (0..n)
                .filter(|&j| probs[j] > probs[i] || (probs[j] == probs[i] && j < i))
                .count()
        })
        .collect();
    let relevant: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let total = relevant.len() as f64;
    let hits_within = |k: usize| relevant.iter().filter(|&&i| rank[i] <= k).count() as f64;
    let ap = relevant
        .iter()
        .map(|&i| hits_within(rank[i]) / rank[i] as f64)
        .sum::<f64>()
        / total;
    let rr = 1.0 / relevant.iter().map(|&i| rank[i]).min().unwrap() as f64;
    let p1 = relevant.iter().any(|&i| rank[i] == 1) as u8 as f64;
    let avg_rec = (1..=n).map(|k| hits_within(k) / total).sum::<f64>() / n as f64;
    [ap, rr, p1, avg_rec]
}

pub fn ranking_metrics_vs_reference(queries: usize) -> Outcome {
    let mut r = rng(12);
    let mut ranked = Vec::with_capacity(queries);
    let mut sums = [0.0; 4];
    let mut refs = Vec::with_capacity(queries);
    for q in 0..queries {
        let n = r.gen_range(1..=20);
        let probs = if q % 2 == 0 {
            coarse_distribution(&mut r, n)
        } else {
            (0..n).map(|_| r.gen::<f64>()).collect()
        };
        let mut labels: Vec<usize> = (0..n).map(|_| usize::from(r.gen_bool(0.3))).collect();
        if !labels.contains(&1) {
            let k = r.gen_range(0..n);
            labels[k] = 1;
        }
        let reference = reference_metrics(&probs, &labels);
        for (s, v) in sums.iter_mut().zip(reference) {
            *s += v;
        }
        refs.push(reference);
        ranked.push(RankedQuery::new(format!("q{q}"), &probs, &labels).map_err(|e| e.to_string())?);
    }
    let report = compute_ranking_metrics(&ranked).map_err(|e| e.to_string())?;
    for m in &report.per_query {
        if !(0.0..=1.0).contains(&m.ap) {
            return Err(format!("query {}: AP {} outside [0, 1]", m.id, m.ap));
        }
    }
    let got = [
        report.map.unwrap(),
        report.mrr.unwrap(),
        report.p_at_1.unwrap(),
        report.avg_rec.unwrap(),
    ];
    let names = ["MAP", "MRR", "P@1", "AvgRec"];
    for k in 0..4 {
        let want = sums[k] / queries as f64;
        if (got[k] - want).abs() > 1e-12 {
            return Err(format!("{}: library {} vs reference {}", names[k], got[k], want));
        }
    }
    for (m, want) in report.per_query.iter().zip(&refs) {
        let lib = [m.ap, m.rr, m.p1, m.avg_rec];
        for k in 0..4 {
            if (lib[k] - want[k]).abs() > 1e-12 {
                return Err(format!(
                    "query {} {}: library {} vs reference {}",
                    m.id, names[k], lib[k], want[k]
                ));
            }
        }
    }
    Ok(format!("{queries} queries, agreement within 1e-12"))
}

pub fn sparsity_vs_count(maps: usize) -> Outcome {
    let mut r = rng(13);
    for k in 0..maps {
        let (m, n) = (r.gen_range(1..=8), r.gen_range(1..=12));
        let mut values = Vec::with_capacity(m * n);
        for _ in 0..m {
            let sharp = r.gen_range(0.5..12.0);
            let logits: Vec<f64> = (0..n).map(|_| r.gen::<f64>() * sharp).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            values.extend(logits.iter().map(|l| l.exp() / z));
        }
        // values exactly at the threshold count as small
        if k % 5 == 0 {
            values[0] = EPSILON;
        }
        let mut small = 0;
        for v in &values {
            if *v <= EPSILON {
                small += 1;
            }
        }
        let want = small as f64 / values.len() as f64;
        let got = sparsity(&values, EPSILON).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("map {k}: sparsity {got} vs count {want}"));
        }
    }
    Ok(format!("{maps} maps, exact match"))
}

/// Two-sided p from every assignment of the pooled values to the groups,
/// with `U` counted pairwise.
fn enumerated_p(a: &[f64], b: &[f64]) -> f64 {
    fn u_stat(a: &[f64], b: &[f64]) -> f64 {
        let mut u = 0.0;
        for x in a {
            for y in b {
                if x > y {
                    u += 1.0;
                } else if x == y {
                    u += 0.5;
                }
            }
        }
        u
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (na, n) = (a.len(), pooled.len());
    let mu = (na * b.len()) as f64 / 2.0;
    let observed = (u_stat(a, b) - mu).abs();
    let (mut extreme, mut all) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let (ga, gb): (Vec<_>, Vec<_>) = (0..n).partition(|&i| mask & (1 << i) != 0);
        let ga: Vec<f64> = ga.into_iter().map(|i| pooled[i]).collect();
        let gb: Vec<f64> = gb.into_iter().map(|i| pooled[i]).collect();
        all += 1;
        if (u_stat(&ga, &gb) - mu).abs() >= observed {
            extreme += 1;
        }
    }
    extreme as f64 / all as f64
}

pub fn mann_whitney_vs_enumeration() -> Outcome {
    let mut r = rng(14);
    let mut cases = 0;
    for na in 1..=5 {
        for nb in 1..=5 {
            for trial in 0..8 {
                let draw = |r: &mut ChaCha8Rng| {
                    if trial % 2 == 0 {
                        r.gen_range(0..4) as f64
                    } else {
                        r.gen::<f64>()
                    }
                };
                let a: Vec<f64> = (0..na).map(|_| draw(&mut r)).collect();
                let b: Vec<f64> = (0..nb).map(|_| draw(&mut r)).collect();
                let got = mann_whitney_u(&a, &b).map_err(|e| e.to_string())?;
                let want = enumerated_p(&a, &b);
                if !got.exact || got.p != want {
                    return Err(format!("{a:?} vs {b:?}: p {} vs enumeration {want}", got.p));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} samples with n <= 5, exact match"))
}

fn head(tape: &mut Tape, h: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (h, w, b) = (
        tape.constant(h.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let p = max_pool_head(tape, h, w, b).expect("valid shapes");
    tape.value(p).data().to_vec()
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn rows_of(t: &Tensor, order: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let data: Vec<f64> = order
        .iter()
        .flat_map(|&i| t.data()[i * d..(i + 1) * d].to_vec())
        .collect();
    Tensor::new(vec![order.len(), d], data).unwrap()
}

pub fn max_pool_head_properties(inputs: usize) -> Outcome {
    let mut r = rng(15);
    for k in 0..inputs {
        let (n, d, c) = (r.gen_range(1..=10), r.gen_range(1..=8), r.gen_range(2..=4));
        let h = random_tensor(&mut r, &[n, d]);
        let w = random_tensor(&mut r, &[c, d]);
        let b = random_tensor(&mut r, &[c]);
        let mut tape = Tape::new();
        let base = head(&mut tape, &h, &w, &b);
        let sum: f64 = base.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || base.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(format!("input {k}: {base:?} is not on the simplex"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        if head(&mut tape, &rows_of(&h, &order), &w, &b) != base {
            return Err(format!("input {k}: row permutation changed the output"));
        }
        let mut dup: Vec<usize> = (0..n).collect();
        dup.push(r.gen_range(0..n));
        dup.push(r.gen_range(0..n));
        if head(&mut tape, &rows_of(&h, &dup), &w, &b) != base {
            return Err(format!("input {k}: duplicating rows changed the output"));
        }
    }
    Ok(format!(
        "{inputs} inputs: permutation and duplication invariant, on the simplex to 1e-9"
    ))
}

/// Synthetic span examples, every other one with its answer moved to a
/// random interval so some answers straddle sentence boundaries.
pub fn conversion_examples(n: usize, seed: u64) -> Vec<Example> {
    let corpus = generate_synthetic_corpus(seed, n, 1, &VocabSpec::default()).expect("valid corpus spec");
    let mut r = rng(seed ^ 0x5eed);
    corpus
        .span
        .into_iter()
        .enumerate()
        .map(|(k, mut ex)| {
            if k % 2 == 1 {
                let ctx = ex.context.clone().unwrap();
                let chars: Vec<char> = ctx.chars().collect();
                let len = chars.len();
                let mut start = r.gen_range(0..len - 1);
                while chars[start].is_whitespace() {
                    start += 1;
                }
                let end = r.gen_range(start + 1..=len.min(start + 40));
                ex.answer_start = Some(start);
                ex.answer_text = Some(char_slice(&ctx, start, end));
            }
            ex
        })
        .collect()
}

pub fn conversion_vs_oracle(n: usize) -> Outcome {
    let mut flagged = 0;
    for ex in conversion_examples(n, 16) {
        let ctx = ex.context.as_deref().unwrap();
        let start = ex.answer_start.unwrap();
        let end = start + char_len(ex.answer_text.as_deref().unwrap());
        let spans = split_sentences(ctx).map_err(|e| e.to_string())?;
        let want: Vec<usize> = spans
            .iter()
            .map(|s| usize::from(s.start < end && start < s.end))
            .collect();
        let (sel, record) = convert_squad_to_squadt(&ex).map_err(|e| format!("{}: {e}", ex.id))?;
        if sel.labels() != want.as_slice() {
            return Err(format!("{}: labels {:?}, oracle {want:?}", ex.id, sel.labels()));
        }
        if !want.contains(&1) {
            return Err(format!("{}: no positive sentence", ex.id));
        }
        let texts: Vec<String> = spans.iter().map(|s| char_slice(ctx, s.start, s.end)).collect();
        if sel.candidates() != texts.as_slice() {
            return Err(format!("{}: candidate texts differ from the sentence spans", ex.id));
        }
        if record.boundary_flag != (want.iter().sum::<usize>() > 1) {
            return Err(format!("{}: boundary flag {}", ex.id, record.boundary_flag));
        }
        flagged += usize::from(record.boundary_flag);
    }
    Ok(format!(
        "{n} examples ({flagged} straddling a boundary), labels match the oracle"
    ))
}

fn source_model(hidden: usize, seed: u64) -> (Model, Vec<String>) {
    let config = ModelConfig {
        embedding_dim: 5,
        hidden,
        num_classes: 2,
        vocab_size: 10,
        keep_prob: 0.8,
    };
    let mut r = rng(seed);
    let emb = random_tensor(&mut r, &[10, 5]);
    let mut vocab = vec!["<pad>".to_string(), "<unk>".to_string()];
    vocab.extend((2..10).map(|i| format!("w{i}")));
    (Model::init(config, ModelKind::Span, &emb, seed).unwrap(), vocab)
}

fn shared_numel(params: &ParamStore) -> usize {
    params.numel_where(|p| !is_answer_path(p))
}

pub fn transfer_surgery() -> Outcome {
    let (model, vocab) = source_model(8, 17);
    let ckpt = Checkpoint::from_bytes(&Checkpoint::from_model(&model, 100, 17, &vocab).to_bytes())
        .map_err(|e| e.to_string())?;
    let source = ckpt.clone().into_model().map_err(|e| e.to_string())?;
    let d = model.config.hidden;
    let mut r = rng(18);
    for c in [2, 3] {
        let target_config = ModelConfig {
            num_classes: c,
            ..model.config.clone()
        };
        let target = transfer_weights(&ckpt, ModelKind::Classify, &target_config, 5).map_err(|e| e.to_string())?;
        for (path, t) in ckpt.params.iter() {
            if is_answer_path(path) {
                continue;
            }
            let got = target
                .params
                .get(path)
                .ok_or_else(|| format!("{path} missing after transfer"))?;
            let same =
                got.shape() == t.shape() && got.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(format!("C={c}: {path} differs from the source checkpoint"));
            }
        }
        for probe in 0..20 {
            let q: Vec<usize> = (0..r.gen_range(1..5)).map(|_| r.gen_range(1..10)).collect();
            let x: Vec<usize> = (0..r.gen_range(1..8)).map(|_| r.gen_range(1..10)).collect();
            let a = source.encode_pair(&q, &x).map_err(|e| e.to_string())?;
            let b = target.encode_pair(&q, &x).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("C={c}: probe {probe} shared outputs differ"));
            }
        }
        let delta = target.params.numel() - shared_numel(&ckpt.params);
        if delta != c * d + c {
            return Err(format!("C={c}: {delta} new parameters, expected {}", c * d + c));
        }
        let head: usize = answer_layout(&target_config, ModelKind::Classify)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        if head != delta {
            return Err(format!("C={c}: layout head {head} vs delta {delta}"));
        }
    }
    Ok("C in {2, 3}: shared parameters bit-equal, 20 probes identical, delta C*d + C".into())
}

fn scalar(w: f64) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::scalar(w));
    p
}

fn grad(g: f64) -> Gradients {
    let mut m = Gradients::new();
    m.insert("w".into(), Tensor::scalar(g));
    m
}

pub fn ema_and_adadelta() -> Outcome {
    // EMA against its closed form over a varying parameter sequence
    let decay = 0.999;
    let mut shadow = scalar(0.5);
    let mut reference = 0.5;
    let mut worst = 0.0f64;
    for t in 0..10_000u32 {
        let p = (t as f64 * 0.37).sin();
        ema_update(&mut shadow, &scalar(p), decay).map_err(|e| e.to_string())?;
        reference = decay * reference + (1.0 - decay) * p;
        worst = worst.max((shadow.get("w").unwrap().data()[0] - reference).abs());
    }
    let mut constant = scalar(2.0);
    for _ in 0..10_000 {
        ema_update(&mut constant, &scalar(-1.0), decay).map_err(|e| e.to_string())?;
    }
    let closed = -1.0 + 3.0 * decay.powi(10_000);
    let err_const = (constant.get("w").unwrap().data()[0] - closed).abs();
    if worst > 1e-12 || err_const > 1e-12 {
        return Err(format!("EMA error {worst:e} (recurrence), {err_const:e} (closed form)"));
    }

    let mut p = scalar(0.0);
    let mut st = OptimizerState::default();
    adadelta_step(&mut p, &grad(1.0), &mut st).map_err(|e| e.to_string())?;
    let first = p.get("w").unwrap().data()[0];
    if (first + 0.002236).abs() > 1e-6 {
        return Err(format!("AdaDelta first step {first}"));
    }

    let mut p = scalar(5.0);
    let mut st = OptimizerState::default();
    let mut steps = 0;
    while p.get("w").unwrap().data()[0].abs() >= 0.05 {
        if steps == 10_000 {
            return Err(format!(
                "|w| still {} after 10000 steps",
                p.get("w").unwrap().data()[0].abs()
            ));
        }
        let w = p.get("w").unwrap().data()[0];
        adadelta_step(&mut p, &grad(2.0 * w), &mut st).map_err(|e| e.to_string())?;
        steps += 1;
    }
    Ok(format!(
        "EMA within {:.1e}, first step {first:.6}, |w| < 0.05 after {steps} steps",
        worst.max(err_const)
    ))
}
