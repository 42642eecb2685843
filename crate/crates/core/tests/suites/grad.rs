//! Central-difference checks of every tape operation and of the full model
//! loss with respect to every trainable parameter.

use qtl_core::datasets::Instance;
use qtl_core::model::{max_pool_head, similarity_matrix, Model, ModelConfig, ModelKind};
use qtl_core::tensor::{grad_check_many, Elementwise, Tape, Tensor, Var};
use qtl_core::training::{instance_loss_value, loss_and_gradients};
use qtl_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Fixed, non-uniform weights so each output coordinate gets its own
/// upstream gradient.
fn project(t: &mut Tape, out: Var) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = t.constant(Tensor::new(
        shape,
        (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect(),
    )?);
    let prod = t.mul(out, w)?;
    Ok(t.sum(prod))
}

/// `(name, input shapes, function)` for every differentiable operation.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o)
        }),
        ("add_broadcast", vec![vec![3, 4], vec![4]], |t, v| {
            let o = t.add(v[0], v[1])?;
            project(t, o)
        }),
        ("sub_broadcast", vec![vec![3, 4], vec![3, 1]], |t, v| {
            let o = t.sub(v[0], v[1])?;
            project(t, o)
        }),
        ("mul_broadcast", vec![vec![3, 4], vec![1, 4]], |t, v| {
            let o = t.mul(v[0], v[1])?;
            project(t, o)
        }),
        ("tanh", vec![vec![2, 3]], |t, v| {
            let o = t.tanh(v[0]);
            project(t, o)
        }),
        ("sigmoid", vec![vec![2, 3]], |t, v| {
            let o = t.sigmoid(v[0]);
            project(t, o)
        }),
        ("scale", vec![vec![4]], |t, v| {
            let o = t.scale(v[0], -1.7);
            project(t, o)
        }),
        ("elementwise_concat", vec![vec![2, 2], vec![2, 3]], |t, v| {
            let o = t.elementwise(Elementwise::ConcatLastAxis, &[v[0], v[1]])?;
            project(t, o)
        }),
        ("concat", vec![vec![3, 2], vec![3, 1], vec![3, 2]], |t, v| {
            let o = t.concat(v)?;
            project(t, o)
        }),
        ("vstack", vec![vec![2, 3], vec![1, 3]], |t, v| {
            let o = t.vstack(v)?;
            project(t, o)
        }),
        ("softmax_vector", vec![vec![5]], |t, v| {
            let o = t.softmax(v[0], 0)?;
            project(t, o)
        }),
        ("softmax_rows", vec![vec![3, 4]], |t, v| {
            let o = t.softmax(v[0], 1)?;
            project(t, o)
        }),
        ("softmax_columns", vec![vec![3, 4]], |t, v| {
            let o = t.softmax(v[0], 0)?;
            project(t, o)
        }),
        ("reduce_max", vec![vec![5, 3]], |t, v| {
            let o = t.reduce_max(v[0])?;
            project(t, o)
        }),
        ("gather_rows", vec![vec![6, 3]], |t, v| {
            let o = t.gather_rows(v[0], &[0, 2, 2, 5])?;
            project(t, o)
        }),
        ("transpose", vec![vec![2, 3]], |t, v| {
            let o = t.transpose(v[0])?;
            project(t, o)
        }),
        ("reshape", vec![vec![2, 3]], |t, v| {
            let o = t.reshape(v[0], &[3, 2])?;
            project(t, o)
        }),
        ("slice_rows", vec![vec![4, 3]], |t, v| {
            let o = t.slice_rows(v[0], 1, 2)?;
            project(t, o)
        }),
        ("slice_cols", vec![vec![3, 5]], |t, v| {
            let o = t.slice_cols(v[0], 2, 3)?;
            project(t, o)
        }),
        ("sum", vec![vec![2, 2]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        }),
        ("nll", vec![vec![4]], |t, v| {
            let p = t.softmax(v[0], 0)?;
            t.nll(p, 2)
        }),
        (
            "gru_forward",
            vec![vec![4, 3], vec![3, 6], vec![2, 6], vec![6], vec![6]],
            |t, v| {
                let o = t.gru(v[0], v[1], v[2], v[3], v[4], false)?;
                project(t, o)
            },
        ),
        (
            "gru_reverse",
            vec![vec![4, 3], vec![3, 6], vec![2, 6], vec![6], vec![6]],
            |t, v| {
                let o = t.gru(v[0], v[1], v[2], v[3], v[4], true)?;
                project(t, o)
            },
        ),
        (
            "similarity",
            vec![vec![4, 3], vec![2, 3], vec![3, 1], vec![3, 1], vec![3]],
            |t, v| {
                let o = similarity_matrix(t, v[0], v[1], v[2], v[3], v[4])?;
                project(t, o)
            },
        ),
        ("max_pool_head", vec![vec![4, 3], vec![2, 3], vec![2]], |t, v| {
            let p = max_pool_head(t, v[0], v[1], v[2])?;
            t.nll(p, 1)
        }),
    ]
}

/// Worst error of every operation at `seed`.
pub fn check_ops(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, 1.0)).collect();
            let err = grad_check_many(f, &inputs, STEP).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, err)
        })
        .collect()
}

fn tiny_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        embedding_dim: 3,
        hidden: 4,
        num_classes,
        vocab_size: 9,
        keep_prob: 1.0,
    }
}

fn ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    // id 0 is padding; 1 is the unknown token and exercises its vector
    (0..n).map(|_| rng.gen_range(1..9)).collect()
}

/// Worst error of the full loss over every trainable coordinate, for a span
/// model and for a sentence classifier.
pub fn check_model(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut out = Vec::new();
    for (name, kind, classes) in [
        ("span_loss", ModelKind::Span, 2),
        ("sentence_loss", ModelKind::Classify, 3),
    ] {
        let config = tiny_config(classes);
        let emb = random(&mut rng, &[config.vocab_size, config.embedding_dim], 1.0);
        let model = Model::init(config, kind, &emb, seed).unwrap();
        let inst = match kind {
            ModelKind::Span => Instance::Span {
                question: ids(&mut rng, 3),
                context: ids(&mut rng, 5),
                gold: (1, 3),
            },
            ModelKind::Classify => Instance::Sentences {
                question: ids(&mut rng, 3),
                sentences: vec![ids(&mut rng, 4), ids(&mut rng, 2)],
                labels: vec![2, 0],
                answerable: true,
            },
        };
        out.push((name, model_error(&model, &inst)));
    }
    out
}

fn model_error(model: &Model, inst: &Instance) -> f64 {
    let (_, grads) = loss_and_gradients(model, inst).unwrap();
    assert!(!grads.is_empty());
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (path, g) in &grads {
        for i in 0..g.numel() {
            let orig = model.params.get(path).unwrap().data()[i];
            let mut at = |x: f64| {
                probe.params.get_mut(path).unwrap().data_mut()[i] = x;
                instance_loss_value(&probe, inst).unwrap()
            };
            let numeric = (at(orig + STEP) - at(orig - STEP)) / (2.0 * STEP);
            at(orig);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}
