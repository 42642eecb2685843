use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use qtl_core::analysis::{dump_attention, sparsity_histogram, Histogram};
use qtl_core::datasets::{
    build_vocab, convert_squad_to_squadt, generate_synthetic_corpus, load_dataset, save_canonical, DatasetFormat,
    Example, Instance, Task, Vocab, VocabSpec,
};
use qtl_core::evaluation::{accuracy, argmax, score_selection, MetricsReport};
use qtl_core::model::{select_span, Model, ModelKind, UNK_EMBEDDING, UNK_ID, WORD_EMBEDDINGS};
use qtl_core::training::{subsample, train, TrainConfig};
use qtl_core::transfer::{ensemble_predict, ensemble_sentences, load_checkpoint, save_checkpoint, Checkpoint};
use qtl_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{AnalyzeArgs, ConvertArgs, EvalArgs, GenerateArgs, TrainArgs};
use crate::manifest::{io_err, RunManifest};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("serializable");
    s.push('\n');
    s
}

fn require_task(examples: &[Example], task: Task, source: &Path) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Usage(format!("{} holds no examples", source.display())));
    }
    if let Some(ex) = examples.iter().find(|e| e.task != task) {
        return Err(Error::Usage(format!(
            "task/data mismatch: --task {} but example {} in {} is a {} example",
            task.as_str(),
            ex.id,
            source.display(),
            ex.task.as_str()
        )));
    }
    Ok(())
}

fn kind_for(task: Task) -> ModelKind {
    match task {
        Task::Span => ModelKind::Span,
        Task::Select | Task::Classify => ModelKind::Classify,
    }
}

/// Vocabulary stored with a checkpoint: its token list and the frozen table
/// with the learned unknown vector restored in its row.
pub fn vocab_from_checkpoint(ckpt: &Checkpoint) -> Result<Vocab> {
    let bad = |message: String| Error::Format {
        locator: "checkpoint".into(),
        message,
    };
    let mut table = ckpt
        .params
        .get(WORD_EMBEDDINGS)
        .ok_or_else(|| bad(format!("missing entry {WORD_EMBEDDINGS}")))?
        .clone();
    let unk = ckpt
        .params
        .get(UNK_EMBEDDING)
        .ok_or_else(|| bad(format!("missing entry {UNK_EMBEDDING}")))?;
    let (_, d) = table.dims2()?;
    if unk.numel() != d {
        return Err(bad(format!("{UNK_EMBEDDING} has {} values, expected {d}", unk.numel())));
    }
    table.data_mut()[UNK_ID * d..(UNK_ID + 1) * d].copy_from_slice(unk.data());
    Vocab::from_parts(ckpt.vocab_tokens()?, table)
}

pub fn cmd_convert(args: &ConvertArgs) -> Result<()> {
    let format: DatasetFormat = args.format.parse()?;
    let examples = load_dataset(&args.input, format)?;
    if examples.is_empty() {
        return Err(Error::Usage(format!("{} holds no examples", args.input.display())));
    }
    let mut converted = Vec::with_capacity(examples.len());
    let mut report = String::new();
    for ex in &examples {
        let (sel, record) = convert_squad_to_squadt(ex)?;
        converted.push(sel);
        report.push_str(&json_line(&record));
    }
    save_canonical(&args.out, &converted)?;
    write_file(&args.report, report)?;
    let mut m = RunManifest::new("convert", None);
    m.input("data", &args.input)?;
    m.output("examples", &args.out)?;
    m.output("report", &args.report)?;
    m.extra("n_examples", converted.len());
    let manifest = args
        .manifest
        .clone()
        .unwrap_or_else(|| sibling(&args.out, "manifest.json"));
    m.write(&manifest)?;
    info!("converted {} examples into {}", converted.len(), args.out.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub n_train: usize,
    pub selected_step: u64,
    pub final_train_loss: f64,
    pub checkpoint: PathBuf,
}

/// Shared body of `train` and `transfer-train`.
pub fn cmd_train(args: &TrainArgs, command: &str) -> Result<TrainSummary> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(c) = args.num_classes {
        cfg.num_classes = c;
    }
    cfg.validate()?;
    let format: DatasetFormat = args.format.parse()?;
    let task: Task = args.task.parse()?;
    let mut train_set = load_dataset(&args.train, format)?;
    let dev_set = load_dataset(&args.dev, format)?;
    require_task(&train_set, task, &args.train)?;
    require_task(&dev_set, task, &args.dev)?;
    if let Some(f) = args.pretrain_fraction {
        train_set = subsample(&train_set, f, cfg.seed)?;
    }

    let init = args.init.as_deref().map(load_checkpoint).transpose()?;
    let vocab = match (&init, &args.embeddings) {
        (Some(ckpt), _) => vocab_from_checkpoint(ckpt)?,
        (None, Some(emb)) => {
            let all: Vec<Example> = train_set.iter().chain(&dev_set).cloned().collect();
            let (vocab, warnings) = build_vocab(&all, emb, cfg.embedding_dim, cfg.seed)?;
            for w in warnings {
                warn!("{w}");
            }
            vocab
        }
        (None, None) => return Err(Error::Usage("training from scratch needs --embeddings".into())),
    };

    let outcome = train(kind_for(task), &train_set, &dev_set, &vocab, &cfg, init.as_ref())?;
    create_dir(&args.out)?;
    let ckpt_path = args.out.join("model.qtx");
    let log_path = args.out.join("train_log.csv");
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    write_file(&log_path, outcome.log.to_csv())?;

    let mut m = RunManifest::new(command, Some(cfg.seed)).with_config(&cfg);
    m.input("train", &args.train)?;
    m.input("dev", &args.dev)?;
    if let Some(p) = &args.init {
        m.input("init", p)?;
    } else if let Some(p) = &args.embeddings {
        m.input("embeddings", p)?;
    }
    m.output("checkpoint", &ckpt_path)?;
    m.output("log", &log_path)?;
    m.extra("task", task.as_str());
    m.extra("n_train", outcome.log.n_train);
    m.extra("selected_step", outcome.log.selected_step);
    if let Some(f) = args.pretrain_fraction {
        m.extra("pretrain_fraction", f);
    }
    m.write(&args.out.join("manifest.json"))?;
    info!(
        "trained on {} examples, selected step {} ({:.1?})",
        outcome.log.n_train, outcome.log.selected_step, outcome.log.wall_clock
    );
    Ok(TrainSummary {
        n_train: outcome.log.n_train,
        selected_step: outcome.log.selected_step,
        final_train_loss: outcome.log.rows.last().map_or(f64::NAN, |r| r.train_loss),
        checkpoint: ckpt_path,
    })
}

/// Loads checkpoints that must agree on kind and vocabulary.
fn load_members(paths: &[PathBuf]) -> Result<(Vec<Model>, Vocab)> {
    let first = paths
        .first()
        .ok_or_else(|| Error::Usage("at least one --ckpt is required".into()))?;
    let mut ckpts = Vec::with_capacity(paths.len());
    for p in paths {
        ckpts.push(load_checkpoint(p)?);
    }
    let vocab = vocab_from_checkpoint(&ckpts[0])?;
    let kind = ckpts[0].kind()?;
    let mut models = Vec::with_capacity(ckpts.len());
    for (p, c) in paths.iter().zip(ckpts) {
        if c.kind()? != kind {
            return Err(Error::Incompatible(vec![format!(
                "{}: {} model, {} is {kind}",
                p.display(),
                c.kind()?,
                first.display()
            )]));
        }
        if c.vocab_tokens()? != vocab.tokens() {
            return Err(Error::Incompatible(vec![format!(
                "{}: vocabulary differs from {}",
                p.display(),
                first.display()
            )]));
        }
        models.push(c.into_model()?);
    }
    Ok((models, vocab))
}

/// Ensemble output for one example.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Prediction {
    Sentences {
        id: String,
        probs: Vec<Vec<f64>>,
    },
    Span {
        id: String,
        p_start: Vec<f64>,
        p_end: Vec<f64>,
        span: (usize, usize),
    },
}

struct Scored {
    prediction: Prediction,
    instance: Instance,
}

fn predict_all(models: &[Model], vocab: &Vocab, examples: &[Example]) -> Result<Vec<Scored>> {
    examples
        .par_iter()
        .map(|ex| {
            let instance = vocab.instance(ex)?;
            let prediction = match &instance {
                Instance::Sentences {
                    question, sentences, ..
                } => Prediction::Sentences {
                    id: ex.id.clone(),
                    probs: ensemble_sentences(models, question, sentences)?,
                },
                Instance::Span { question, context, .. } => {
                    let mut starts = Vec::with_capacity(models.len());
                    let mut ends = Vec::with_capacity(models.len());
                    for m in models {
                        let p = m.predict_span(question, context)?;
                        starts.push(p.p_start);
                        ends.push(p.p_end);
                    }
                    let p_start = ensemble_predict(&starts)?;
                    let p_end = ensemble_predict(&ends)?;
                    let span = select_span(&p_start, &p_end)?;
                    Prediction::Span {
                        id: ex.id.clone(),
                        p_start,
                        p_end,
                        span,
                    }
                }
            };
            Ok(Scored { prediction, instance })
        })
        .collect()
}

fn load_for_models(args: &EvalArgs) -> Result<(Vec<Model>, Vocab, Vec<Example>, Task)> {
    let task: Task = args.task.parse()?;
    let format: DatasetFormat = args.format.parse()?;
    let data = load_dataset(&args.data, format)?;
    require_task(&data, task, &args.data)?;
    let (models, vocab) = load_members(&args.ckpt)?;
    if models[0].kind != kind_for(task) {
        return Err(Error::Usage(format!(
            "task/data mismatch: --task {} needs a {} model, checkpoint is {}",
            task.as_str(),
            kind_for(task),
            models[0].kind
        )));
    }
    Ok((models, vocab, data, task))
}

fn report_for(task: Task, scored: &[Scored]) -> Result<MetricsReport> {
    match task {
        Task::Select => {
            let rows: Vec<(String, Vec<f64>, Vec<usize>)> = scored
                .iter()
                .map(|s| match (&s.prediction, &s.instance) {
                    (Prediction::Sentences { id, probs }, Instance::Sentences { labels, .. }) => {
                        (id.clone(), probs.iter().map(|p| p[1]).collect(), labels.clone())
                    }
                    _ => unreachable!("select predictions are per sentence"),
                })
                .collect();
            score_selection(rows.iter().map(|(id, p, l)| (id.as_str(), p.as_slice(), l.as_slice())))
        }
        Task::Classify => {
            let mut pred = Vec::new();
            let mut gold = Vec::new();
            for s in scored {
                if let (Prediction::Sentences { probs, .. }, Instance::Sentences { labels, .. }) =
                    (&s.prediction, &s.instance)
                {
                    pred.extend(probs.iter().map(|p| argmax(p)));
                    gold.extend(labels.iter().copied());
                }
            }
            Ok(MetricsReport {
                accuracy: Some(accuracy(&pred, &gold)?),
                n_queries: gold.len(),
                ..Default::default()
            })
        }
        Task::Span => {
            let hits: Vec<usize> = scored
                .iter()
                .map(|s| match (&s.prediction, &s.instance) {
                    (Prediction::Span { span, .. }, Instance::Span { gold, .. }) => usize::from(span == gold),
                    _ => unreachable!("span predictions come from span instances"),
                })
                .collect();
            Ok(MetricsReport {
                accuracy: Some(accuracy(&hits, &vec![1; hits.len()])?),
                n_queries: hits.len(),
                ..Default::default()
            })
        }
    }
}

pub fn cmd_evaluate(args: &EvalArgs) -> Result<MetricsReport> {
    let (models, vocab, data, task) = load_for_models(args)?;
    let scored = predict_all(&models, &vocab, &data)?;
    let report = report_for(task, &scored)?;
    create_dir(&args.out)?;
    let path = args.out.join("metrics.json");
    let json = report.to_json();
    write_file(&path, format!("{json}\n"))?;
    println!("{json}");
    let mut m = RunManifest::new("evaluate", None);
    m.input("data", &args.data)?;
    for (k, p) in args.ckpt.iter().enumerate() {
        m.input(&format!("ckpt{k}"), p)?;
    }
    m.output("metrics", &path)?;
    m.extra("task", task.as_str());
    m.write(&args.out.join("manifest.json"))?;
    Ok(report)
}

pub fn cmd_ensemble(args: &EvalArgs) -> Result<Vec<Prediction>> {
    let (models, vocab, data, task) = load_for_models(args)?;
    let predictions: Vec<Prediction> = predict_all(&models, &vocab, &data)?
        .into_iter()
        .map(|s| s.prediction)
        .collect();
    create_dir(&args.out)?;
    let path = args.out.join("predictions.jsonl");
    write_file(&path, predictions.iter().map(json_line).collect::<String>())?;
    let mut m = RunManifest::new("ensemble", None);
    m.input("data", &args.data)?;
    for (k, p) in args.ckpt.iter().enumerate() {
        m.input(&format!("ckpt{k}"), p)?;
    }
    m.output("predictions", &path)?;
    m.extra("task", task.as_str());
    m.extra("members", args.ckpt.len());
    m.write(&args.out.join("manifest.json"))?;
    Ok(predictions)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityComparison {
    pub mean_a: f64,
    pub mean_b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutput {
    pub histograms: Vec<Histogram>,
    /// Per-map sparsity values for each checkpoint.
    pub sparsities: Vec<Vec<f64>>,
    pub comparison: Option<SparsityComparison>,
}

fn analyze_one(
    model: &Model,
    vocab: &Vocab,
    data: &[Example],
    dir: &Path,
    epsilon: f64,
) -> Result<Vec<(PathBuf, f64)>> {
    let per_example: Vec<Vec<(PathBuf, f64)>> = data
        .par_iter()
        .map(|ex| {
            dump_attention(model, vocab, ex, dir)?
                .into_iter()
                .map(|(p, map)| Ok((p, map.sparsity(epsilon)?)))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_example.into_iter().flatten().collect())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<AnalysisOutput> {
    if args.ckpt.is_empty() || args.ckpt.len() > 2 {
        return Err(Error::Usage(format!(
            "analyze takes one or two --ckpt, got {}",
            args.ckpt.len()
        )));
    }
    let format: DatasetFormat = args.format.parse()?;
    let data = load_dataset(&args.data, format)?;
    if data.is_empty() {
        return Err(Error::Usage(format!("{} holds no examples", args.data.display())));
    }
    create_dir(&args.out)?;
    let mut m = RunManifest::new("analyze", None);
    m.input("data", &args.data)?;
    let mut histograms = Vec::new();
    let mut sparsities = Vec::new();
    for (k, path) in args.ckpt.iter().enumerate() {
        let ckpt = load_checkpoint(path)?;
        let vocab = vocab_from_checkpoint(&ckpt)?;
        let model = ckpt.into_model()?;
        let base = if args.ckpt.len() == 1 {
            args.out.clone()
        } else {
            args.out.join(["a", "b"][k])
        };
        create_dir(&base)?;
        let maps = analyze_one(&model, &vocab, &data, &base.join("attention"), args.epsilon)?;
        let values: Vec<f64> = maps.iter().map(|(_, s)| *s).collect();
        let hist = sparsity_histogram(&values, args.bins)?;

        let mut csv = String::from("map,sparsity\n");
        for (p, s) in &maps {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            csv.push_str(&format!("{name},{s:.6}\n"));
        }
        let csv_path = base.join("sparsity.csv");
        let hist_path = base.join("sparsity_histogram.json");
        write_file(&csv_path, csv)?;
        write_file(&hist_path, json_line(&hist))?;
        let tag = if args.ckpt.len() == 1 {
            String::new()
        } else {
            format!("_{}", ["a", "b"][k])
        };
        m.input(&format!("ckpt{tag}"), path)?;
        m.output(&format!("sparsity{tag}"), &csv_path)?;
        m.output(&format!("histogram{tag}"), &hist_path)?;
        m.extra(&format!("n_maps{tag}"), maps.len());
        histograms.push(hist);
        sparsities.push(values);
    }
    let comparison = if histograms.len() == 2 {
        let (a, b) = (histograms[0].mean, histograms[1].mean);
        let cmp = SparsityComparison {
            mean_a: a,
            mean_b: b,
            delta: a - b,
        };
        let line = serde_json::to_string(&cmp).expect("serializable");
        println!("{line}");
        let path = args.out.join("comparison.json");
        write_file(&path, format!("{line}\n"))?;
        m.output("comparison", &path)?;
        Some(cmp)
    } else {
        None
    };
    m.write(&args.out.join("manifest.json"))?;
    Ok(AnalysisOutput {
        histograms,
        sparsities,
        comparison,
    })
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let corpus = generate_synthetic_corpus(args.seed, args.n_span, args.n_select, &VocabSpec::default())?;
    create_dir(&args.out)?;
    let span = args.out.join("span.jsonl");
    let select = args.out.join("select.jsonl");
    let emb = args.out.join("embeddings.txt");
    save_canonical(&span, &corpus.span)?;
    save_canonical(&select, &corpus.select)?;
    write_file(&emb, corpus.embeddings_file(args.dim, args.seed))?;
    let mut m = RunManifest::new("generate", Some(args.seed));
    m.output("span", &span)?;
    m.output("select", &select)?;
    m.output("embeddings", &emb)?;
    m.write(&args.out.join("manifest.json"))?;
    Ok(())
}
