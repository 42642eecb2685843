use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::optim::{adadelta_step, clip_global_norm, ema_update, Gradients, OptimizerState};
use super::TrainConfig;
use crate::datasets::{Example, Instance, Task, Vocab};
use crate::evaluation::{argmax, score_selection};
use crate::model::heads::{classify_all, span_distributions};
use crate::model::{select_span, Graph, Model, ModelConfig, ModelKind, ParamStore};
use crate::rng;
use crate::tensor::Var;
use crate::transfer::{round_f32, transfer_weights, Checkpoint};
use crate::{Error, Result};

/// Model-selection metric, fixed by the dev task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevMetric {
    /// Mean average precision over answerable queries.
    Map,
    /// Per-sentence argmax accuracy.
    Accuracy,
    /// Predicted token span equals the gold span.
    ExactSpan,
}

impl DevMetric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Span => Self::ExactSpan,
            Task::Select => Self::Map,
            Task::Classify => Self::Accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    /// Mean minibatch loss since the previous row; at step 0 the loss of the
    /// first minibatch before any update.
    pub train_loss: f64,
    pub dev_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub selected_step: u64,
    pub n_train: usize,
    /// Not part of the CSV, which must be reproducible.
    pub wall_clock: Duration,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,dev_metric\n");
        for r in &self.rows {
            writeln!(out, "{},{:.8},{:.8}", r.step, r.train_loss, r.dev_metric).expect("string write");
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// EMA weights at the selected step.
    pub checkpoint: Checkpoint,
    /// The same weights as a ready model.
    pub model: Model,
    pub log: TrainLog,
}

fn kind_accepts(kind: ModelKind, task: Task) -> bool {
    matches!(
        (kind, task),
        (ModelKind::Span, Task::Span) | (ModelKind::Classify, Task::Select | Task::Classify)
    )
}

fn single_task(set: &[Example], what: &str) -> Result<Task> {
    let first = set
        .first()
        .ok_or_else(|| Error::Usage(format!("{what} set is empty")))?
        .task;
    if let Some(ex) = set.iter().find(|e| e.task != first) {
        return Err(Error::Usage(format!(
            "{what} set mixes {} and {} examples (first at {})",
            first.as_str(),
            ex.task.as_str(),
            ex.id
        )));
    }
    Ok(first)
}

/// Loss graph of one instance: summed start/end cross-entropy for spans,
/// mean per-sentence cross-entropy otherwise.
fn instance_loss(g: &mut Graph<'_>, config: &ModelConfig, inst: &Instance) -> Result<Var> {
    match inst {
        Instance::Span {
            question,
            context,
            gold,
        } => {
            let (ps, pe) = span_distributions(g, config, question, context)?;
            let ls = g.tape.nll(ps, gold.0)?;
            let le = g.tape.nll(pe, gold.1)?;
            g.tape.add(ls, le)
        }
        Instance::Sentences {
            question,
            sentences,
            labels,
            ..
        } => {
            let mut total: Option<Var> = None;
            for (probs, &label) in classify_all(g, question, sentences)?.into_iter().zip(labels) {
                let l = g.tape.nll(probs, label)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.tape.add(t, l)?,
                });
            }
            let total = total.ok_or(Error::EmptySequence("instance sentences"))?;
            Ok(g.tape.scale(total, 1.0 / sentences.len() as f64))
        }
    }
}

type SparseGrads<'p> = Vec<(&'p str, Vec<f64>)>;

fn instance_grads<'p>(
    params: &'p ParamStore,
    config: &ModelConfig,
    inst: &Instance,
    dropout: Option<rng::StreamRng>,
) -> Result<(f64, SparseGrads<'p>)> {
    let mut g = Graph::training(params, dropout.map(|r| (config.keep_prob, r)));
    let loss = instance_loss(&mut g, config, inst)?;
    let value = g.tape.value(loss).data()[0];
    g.tape.backward(loss)?;
    let grads = g
        .bound_trainable()
        .into_iter()
        .map(|(path, v)| (path, g.tape.grad(v).expect("trainable leaf has a gradient").to_vec()))
        .collect();
    Ok((value, grads))
}

/// Loss of one instance and its gradient for every trainable parameter the
/// pass touched, without dropout.
pub fn loss_and_gradients(model: &Model, inst: &Instance) -> Result<(f64, Gradients)> {
    let (loss, sparse) = instance_grads(&model.params, &model.config, inst, None)?;
    let mut out = Gradients::new();
    for (path, g) in sparse {
        let shape = model.params.get(path).expect("bound parameter").shape().to_vec();
        out.insert(path.to_string(), crate::tensor::Tensor::new(shape, g)?);
    }
    Ok((loss, out))
}

/// Deterministic loss of one instance.
pub fn instance_loss_value(model: &Model, inst: &Instance) -> Result<f64> {
    let mut g = Graph::inference(&model.params);
    let loss = instance_loss(&mut g, &model.config, inst)?;
    Ok(g.tape.value(loss).data()[0])
}

/// Mean loss and mean gradient over a minibatch. Per-example work runs in
/// parallel; the reduction order is fixed.
fn batch_grads(
    params: &ParamStore,
    config: &ModelConfig,
    data: &[Instance],
    batch: &[usize],
    seed: u64,
    step: u64,
) -> Result<(f64, Gradients)> {
    let results: Vec<Result<(f64, SparseGrads<'_>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, &idx)| {
            let rng = rng::substream(seed, "dropout", &[step, slot as u64]);
            instance_grads(params, config, &data[idx], Some(rng))
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut sum: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in results {
        let (l, grads) = r?;
        loss += l;
        for (path, g) in grads {
            match sum.get_mut(path) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    sum.insert(path, g);
                }
            }
        }
    }
    let mut out = Gradients::new();
    for (path, mut g) in sum {
        g.iter_mut().for_each(|v| *v *= scale);
        let shape = params.get(path).expect("bound parameter").shape().to_vec();
        out.insert(path.to_string(), crate::tensor::Tensor::new(shape, g)?);
    }
    Ok((loss * scale, out))
}

/// Infinite sequence of epoch permutations, cut into minibatches.
struct Schedule {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Schedule {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch: batch.min(n),
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.order.len() {
                self.order = (0..self.n).collect();
                self.order
                    .shuffle(&mut rng::substream(self.seed, "shuffle", &[self.epoch]));
                self.epoch += 1;
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Dev metric of `model` on tokenised `data`.
pub fn dev_metric(model: &Model, data: &[Instance], metric: DevMetric) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("dev set is empty".into()));
    }
    match metric {
        DevMetric::ExactSpan => {
            let hits = data
                .par_iter()
                .map(|inst| match inst {
                    Instance::Span {
                        question,
                        context,
                        gold,
                    } => Ok(model.predict_span(question, context)?.best == *gold),
                    _ => Err(Error::Usage("exact-span metric needs span instances".into())),
                })
                .collect::<Result<Vec<bool>>>()?;
            Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
        }
        DevMetric::Map | DevMetric::Accuracy => {
            let probs = data
                .par_iter()
                .map(|inst| match inst {
                    Instance::Sentences {
                        question, sentences, ..
                    } => model.classify_sentences(question, sentences),
                    _ => Err(Error::Usage("sentence metrics need sentence instances".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<&[usize]> = data
                .iter()
                .map(|inst| match inst {
                    Instance::Sentences { labels, .. } => labels.as_slice(),
                    _ => unreachable!("checked above"),
                })
                .collect();
            if metric == DevMetric::Map {
                let relevant: Vec<Vec<f64>> = probs.iter().map(|p| p.iter().map(|c| c[1]).collect()).collect();
                let ids: Vec<String> = (0..data.len()).map(|i| i.to_string()).collect();
                let queries = (0..data.len()).map(|i| (ids[i].as_str(), relevant[i].as_slice(), labels[i]));
                Ok(score_selection(queries)?.map.expect("ranking report has MAP"))
            } else {
                let mut hits = 0usize;
                let mut total = 0usize;
                for (p, l) in probs.iter().zip(&labels) {
                    for (c, &gold) in p.iter().zip(l.iter()) {
                        hits += usize::from(argmax(c) == gold);
                        total += 1;
                    }
                }
                Ok(hits as f64 / total as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitStats {
    /// Mean instance loss without dropout.
    pub loss: f64,
    /// Per-sentence argmax accuracy, or exact-span accuracy for spans.
    pub accuracy: f64,
}

pub fn fit_stats(model: &Model, data: &[Instance]) -> Result<FitStats> {
    if data.is_empty() {
        return Err(Error::Usage("no instances".into()));
    }
    let per: Vec<(f64, usize, usize)> = data
        .par_iter()
        .map(|inst| {
            let mut g = Graph::inference(&model.params);
            let loss = instance_loss(&mut g, &model.config, inst)?;
            let loss = g.tape.value(loss).data()[0];
            let (hits, total) = match inst {
                Instance::Span {
                    question,
                    context,
                    gold,
                } => {
                    let p = model.predict_span(question, context)?;
                    (usize::from(select_span(&p.p_start, &p.p_end)? == *gold), 1)
                }
                Instance::Sentences {
                    question,
                    sentences,
                    labels,
                    ..
                } => {
                    let probs = model.classify_sentences(question, sentences)?;
                    let hits = probs.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
                    (hits, labels.len())
                }
            };
            Ok((loss, hits, total))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let hits: usize = per.iter().map(|p| p.1).sum();
    let total: usize = per.iter().map(|p| p.2).sum();
    Ok(FitStats {
        loss,
        accuracy: hits as f64 / total as f64,
    })
}

/// Trains a `kind` model with AdaDelta, EMA weights and patience-based early
/// stopping on the dev metric. With `init`, the shared modules start from the
/// checkpoint: a checkpoint of the same kind is resumed whole, one of the
/// other kind goes through [`transfer_weights`].
pub fn train(
    kind: ModelKind,
    train_set: &[Example],
    dev_set: &[Example],
    vocab: &Vocab,
    config: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    config.validate()?;
    let train_task = single_task(train_set, "training")?;
    let dev_task = single_task(dev_set, "dev")?;
    for task in [train_task, dev_task] {
        if !kind_accepts(kind, task) {
            return Err(Error::Usage(format!(
                "a {kind} model cannot train on {} data",
                task.as_str()
            )));
        }
    }
    if train_task == Task::Select && config.num_classes != 2 {
        return Err(Error::Usage("sentence selection needs num_classes=2".into()));
    }
    let metric = DevMetric::for_task(dev_task);
    let train_data = train_set
        .iter()
        .map(|e| vocab.instance(e))
        .collect::<Result<Vec<_>>>()?;
    let dev_data = dev_set.iter().map(|e| vocab.instance(e)).collect::<Result<Vec<_>>>()?;
    let labels_fit = |data: &[Instance]| {
        data.iter().all(|inst| match inst {
            Instance::Sentences { labels, .. } => labels.iter().all(|&l| l < config.num_classes),
            Instance::Span { .. } => true,
        })
    };
    if !labels_fit(&train_data) || !labels_fit(&dev_data) {
        return Err(Error::Usage(format!(
            "labels must be below num_classes={}",
            config.num_classes
        )));
    }

    let model_config = ModelConfig {
        embedding_dim: vocab.embedding_dim(),
        hidden: config.hidden,
        num_classes: config.num_classes,
        vocab_size: vocab.len(),
        keep_prob: config.keep_prob,
    };
    let seed = config.seed;
    let model = match init {
        None => Model::init(model_config.clone(), kind, vocab.embeddings(), seed)?,
        Some(ckpt) => {
            let fresh = transfer_weights(ckpt, kind, &model_config, seed)?;
            if ckpt.kind()? == kind {
                let mut params = fresh.params;
                for (path, t) in ckpt.params.iter() {
                    params.insert(path, t.clone());
                }
                Model::from_params(model_config.clone(), kind, params)?
            } else {
                fresh
            }
        }
    };

    let mut params = model.params;
    let mut shadow = params.clone();
    let mut state = OptimizerState::new(config.rho, config.epsilon, config.lr);
    let mut schedule = Schedule::new(train_data.len(), config.batch, seed);
    let evaluate = |shadow: &ParamStore| -> Result<f64> {
        let m = Model::from_params(model_config.clone(), kind, round_f32(shadow))?;
        dev_metric(&m, &dev_data, metric)
    };

    // step-0 row: dev metric of the initial weights, loss of the batch the
    // first update will see
    let first = schedule.next_batch();
    let (first_loss, first_grads) = batch_grads(&params, &model_config, &train_data, &first, seed, 1)?;
    let m0 = evaluate(&shadow)?;
    let mut rows = vec![LogRow {
        step: 0,
        train_loss: first_loss,
        dev_metric: m0,
    }];
    log::info!("step 0: loss {first_loss:.4} dev {m0:.4}");
    let mut best = (0u64, m0, shadow.clone());
    let mut pending = Some((first_loss, first_grads));
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);

    if config.patience > 0 {
        for step in 1..=config.max_steps {
            let (loss, mut grads) = match pending.take() {
                Some(p) => p,
                None => {
                    let batch = schedule.next_batch();
                    batch_grads(&params, &model_config, &train_data, &batch, seed, step)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    message: format!("training loss is {loss}"),
                });
            }
            let norm = clip_global_norm(&mut grads, config.clip);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    message: format!("gradient norm is {norm}"),
                });
            }
            adadelta_step(&mut params, &grads, &mut state)?;
            ema_update(&mut shadow, &params, config.ema)?;
            loss_sum += loss;
            loss_n += 1;

            if step % config.eval_every == 0 || step == config.max_steps {
                let m = evaluate(&shadow)?;
                let mean = loss_sum / loss_n as f64;
                log::info!("step {step}: loss {mean:.4} dev {m:.4}");
                rows.push(LogRow {
                    step,
                    train_loss: mean,
                    dev_metric: m,
                });
                (loss_sum, loss_n) = (0.0, 0);
                if m >= best.1 {
                    best = (step, m, shadow.clone());
                }
                if step - best.0 >= config.patience {
                    break;
                }
            }
        }
    }

    let (selected_step, _, weights) = best;
    let selected = Model::from_params(model_config, kind, weights)?;
    let checkpoint = Checkpoint::from_model(&selected, selected_step, seed, vocab.tokens());
    let model = checkpoint.clone().into_model()?;
    Ok(TrainOutcome {
        checkpoint,
        model,
        log: TrainLog {
            rows,
            selected_step,
            n_train: train_set.len(),
            wall_clock: started.elapsed(),
        },
    })
}
