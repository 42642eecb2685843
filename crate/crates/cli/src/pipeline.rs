//! End-to-end synthetic experiment: generate, pretrain a span model, convert,
//! finetune with and without the pretrained weights, evaluate and compare.

use std::fs;
use std::path::Path;

use log::info;
use qtl_core::datasets::{
    build_vocab_from_str, generate_synthetic_corpus, save_canonical, Example, Instance, SyntheticCorpus, Vocab,
    VocabSpec,
};
use qtl_core::evaluation::{mann_whitney_u, mcnemar, score_selection, MannWhitney, McNemar, MetricsReport};
use qtl_core::model::{Model, ModelKind};
use qtl_core::training::{subsample, train, TrainConfig, TrainOutcome};
use qtl_core::transfer::save_checkpoint;
use qtl_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::{io_err, RunManifest};

/// Pretraining recipe sized for a single desktop core.
pub fn desk_pretrain_config() -> TrainConfig {
    TrainConfig {
        hidden: 16,
        embedding_dim: 16,
        batch: 5,
        lr: 1.0,
        ema: 0.995,
        keep_prob: 0.9,
        max_steps: 50_000,
        eval_every: 2000,
        patience: 20_000,
        ..TrainConfig::default()
    }
}

pub fn desk_finetune_config() -> TrainConfig {
    TrainConfig {
        batch: 10,
        ema: 0.99,
        max_steps: 4000,
        eval_every: 250,
        patience: 4000,
        ..desk_pretrain_config()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_pretrain: usize,
    pub n_span_dev: usize,
    pub n_finetune: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Pretraining fractions to sweep, each producing one transferred model.
    pub fractions: Vec<f64>,
    /// Also train the no-pretraining baseline.
    pub scratch: bool,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub vocab: VocabSpec,
}

impl SyntheticSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            n_pretrain: 2000,
            n_span_dev: 100,
            n_finetune: 200,
            n_dev: 100,
            n_test: 500,
            fractions: vec![1.0],
            scratch: true,
            pretrain: desk_pretrain_config(),
            finetune: desk_finetune_config(),
            vocab: VocabSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// Transferred MAP minus scratch MAP.
    pub gain: f64,
    /// Per-query AP, transferred (a) against scratch (b).
    pub mann_whitney: MannWhitney,
    /// Discordant P@1 counts: `b` transferred right only, `c` scratch right only.
    pub discordant: (u64, u64),
    pub mcnemar: Option<McNemar>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FractionResult {
    pub fraction: f64,
    pub n_pretrain: usize,
    /// Exact-span accuracy of the pretrained model on the span dev split.
    pub pretrain_dev: f64,
    pub test: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vs_scratch: Option<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticReport {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scratch: Option<MetricsReport>,
    pub fractions: Vec<FractionResult>,
}

impl SyntheticReport {
    pub fn fraction(&self, f: f64) -> Option<&FractionResult> {
        self.fractions.iter().find(|r| r.fraction == f)
    }
}

struct Splits<'a> {
    span_train: &'a [Example],
    span_dev: &'a [Example],
    sel_train: &'a [Example],
    sel_dev: &'a [Example],
    sel_test: &'a [Example],
}

fn split<'a>(corpus: &'a SyntheticCorpus, spec: &SyntheticSpec) -> Splits<'a> {
    let (span_train, span_dev) = corpus.span.split_at(spec.n_pretrain);
    let (sel_train, rest) = corpus.select.split_at(spec.n_finetune);
    let (sel_dev, sel_test) = rest.split_at(spec.n_dev);
    Splits {
        span_train,
        span_dev,
        sel_train,
        sel_dev,
        sel_test,
    }
}

fn test_report(model: &Model, vocab: &Vocab, test: &[Example]) -> Result<MetricsReport> {
    let rows: Vec<(String, Vec<f64>, Vec<usize>)> = test
        .par_iter()
        .map(|ex| match vocab.instance(ex)? {
            Instance::Sentences {
                question,
                sentences,
                labels,
                ..
            } => {
                let probs = model.classify_sentences(&question, &sentences)?;
                Ok((ex.id.clone(), probs.iter().map(|p| p[1]).collect(), labels))
            }
            Instance::Span { .. } => Err(Error::Usage(format!("test example {} is not a selection query", ex.id))),
        })
        .collect::<Result<_>>()?;
    score_selection(rows.iter().map(|(id, p, l)| (id.as_str(), p.as_slice(), l.as_slice())))
}

fn compare(transfer: &MetricsReport, scratch: &MetricsReport) -> Result<Comparison> {
    let ap_t: Vec<f64> = transfer.per_query.iter().map(|q| q.ap).collect();
    let ap_s: Vec<f64> = scratch.per_query.iter().map(|q| q.ap).collect();
    let (mut b, mut c) = (0u64, 0u64);
    for (t, s) in transfer.per_query.iter().zip(&scratch.per_query) {
        match (t.p1 > 0.5, s.p1 > 0.5) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(Comparison {
        gain: transfer.map.unwrap_or(0.0) - scratch.map.unwrap_or(0.0),
        mann_whitney: mann_whitney_u(&ap_t, &ap_s)?,
        discordant: (b, c),
        mcnemar: if b + c > 0 { Some(mcnemar(b, c)?) } else { None },
    })
}

fn save_run(dir: Option<&Path>, name: &str, outcome: &TrainOutcome, m: &mut RunManifest) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    let ckpt = dir.join(format!("{name}.qtx"));
    let log = dir.join(format!("{name}_log.csv"));
    save_checkpoint(&outcome.checkpoint, &ckpt)?;
    fs::write(&log, outcome.log.to_csv()).map_err(|e| io_err(&log, e))?;
    m.output(&format!("{name}.checkpoint"), &ckpt)?;
    m.output(&format!("{name}.log"), &log)?;
    Ok(())
}

fn fraction_tag(f: f64) -> String {
    format!("{f}").replace('.', "_")
}

/// Runs the experiment; with `out`, every dataset, checkpoint, log and the
/// report are written there alongside a manifest.
pub fn run_synthetic(spec: &SyntheticSpec, out: Option<&Path>) -> Result<SyntheticReport> {
    let mut pre_cfg = spec.pretrain.clone();
    let mut fine_cfg = spec.finetune.clone();
    pre_cfg.seed = spec.seed;
    fine_cfg.seed = spec.seed;
    if pre_cfg.embedding_dim != fine_cfg.embedding_dim || pre_cfg.hidden != fine_cfg.hidden {
        return Err(Error::Usage(
            "pretrain and finetune configs must share embedding_dim and hidden".into(),
        ));
    }
    if spec.n_pretrain == 0 || spec.n_span_dev == 0 || spec.n_finetune == 0 || spec.n_dev == 0 || spec.n_test == 0 {
        return Err(Error::Usage("every split needs at least one example".into()));
    }
    let n_select = spec.n_finetune + spec.n_dev + spec.n_test;
    let corpus = generate_synthetic_corpus(spec.seed, spec.n_pretrain + spec.n_span_dev, n_select, &spec.vocab)?;
    let emb = corpus.embeddings_file(pre_cfg.embedding_dim, spec.seed);
    let all: Vec<Example> = corpus.span.iter().chain(&corpus.select).cloned().collect();
    let (vocab, _) = build_vocab_from_str(&all, &emb, pre_cfg.embedding_dim, spec.seed, "synthetic embeddings")?;
    let s = split(&corpus, spec);

    let mut m = RunManifest::new("synthetic", Some(spec.seed)).with_config(&fine_cfg);
    m.extra("pretrain_config", pre_cfg.to_kv());
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (name, data) in [
            ("span_train", s.span_train),
            ("span_dev", s.span_dev),
            ("select_train", s.sel_train),
            ("select_dev", s.sel_dev),
            ("select_test", s.sel_test),
        ] {
            let p = dir.join(format!("{name}.jsonl"));
            save_canonical(&p, data)?;
            m.output(name, &p)?;
        }
        let p = dir.join("embeddings.txt");
        fs::write(&p, &emb).map_err(|e| io_err(&p, e))?;
        m.output("embeddings", &p)?;
    }

    let scratch = if spec.scratch {
        info!("seed {}: training scratch baseline", spec.seed);
        let run = train(ModelKind::Classify, s.sel_train, s.sel_dev, &vocab, &fine_cfg, None)?;
        save_run(out, "scratch", &run, &mut m)?;
        Some(test_report(&run.model, &vocab, s.sel_test)?)
    } else {
        None
    };

    let mut fractions = Vec::new();
    for &f in &spec.fractions {
        let pre_set = subsample(s.span_train, f, spec.seed)?;
        info!("seed {}: pretraining on {} span examples", spec.seed, pre_set.len());
        let pre = train(ModelKind::Span, &pre_set, s.span_dev, &vocab, &pre_cfg, None)?;
        let pretrain_dev = pre
            .log
            .rows
            .iter()
            .find(|r| r.step == pre.log.selected_step)
            .map_or(f64::NAN, |r| r.dev_metric);
        let fine = train(
            ModelKind::Classify,
            s.sel_train,
            s.sel_dev,
            &vocab,
            &fine_cfg,
            Some(&pre.checkpoint),
        )?;
        let tag = fraction_tag(f);
        save_run(out, &format!("pretrain_{tag}"), &pre, &mut m)?;
        save_run(out, &format!("transfer_{tag}"), &fine, &mut m)?;
        let test = test_report(&fine.model, &vocab, s.sel_test)?;
        let vs_scratch = scratch.as_ref().map(|sc| compare(&test, sc)).transpose()?;
        fractions.push(FractionResult {
            fraction: f,
            n_pretrain: pre_set.len(),
            pretrain_dev,
            test,
            vs_scratch,
        });
    }

    let report = SyntheticReport {
        seed: spec.seed,
        scratch,
        fractions,
    };
    if let Some(dir) = out {
        let p = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(&report).expect("serializable");
        text.push('\n');
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        m.output("report", &p)?;
        m.write(&dir.join("manifest.json"))?;
    }
    Ok(report)
}
