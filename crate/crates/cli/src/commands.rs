//! One function per subcommand. Each reads a resolved [`RunConfig`] and
//! writes its artifacts under the run directory.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use embinv::corpus::{
    build_inversion_dataset, generate_hypothesis_dataset, ingest_corpus, read_corpus, read_dataset_manifest,
    split_train_eval, synthetic_corpus, write_corpus, write_dataset_manifest, Document, InversionDataset,
    TokenizerSpec,
};
use embinv::defense::{noise_sweep, write_tradeoff, RetrievalTask};
use embinv::embedders::{
    CachedEmbedder, Embedder, EmbeddingCache, RemoteEmbedder, RemoteEndpoint, SyntheticEmbedder, TableEncoder,
};
use embinv::inference::{
    analyze_hypothesis_closeness, write_traces, BaseDecode, BeamConfig, CorrectionSearch, Initializer,
    InversionMethod, ModelStack,
};
use embinv::metrics::{
    evaluate_dataset, frequency_bucketed_accuracy, name_recovery, word_counts, EvalOptions, ReconstructionReport,
};
use embinv::models::{
    augment_hypotheses, empty_embedding, load_inverter, DecodeStrategy, Inverter,
    InverterConfig, ModelRole, Trainer,
};
use embinv::plot::{bar_chart, write_svg};
use embinv::tokenizer::WordTokenizer;
use embinv::{Error, Result};

use crate::config::{AnalysisKind, EmbedderSpec, MethodKind, RunConfig, Split};

const DATASET_FILE: &str = "dataset.jsonl";
const TOKENIZER_FILE: &str = "tokenizer.txt";
const EMBEDDER_FILE: &str = "embedder.json";
const CACHE_FILE: &str = "cache.bin";

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn raw_embedder(spec: &EmbedderSpec) -> Result<Arc<dyn Embedder>> {
    Ok(match spec {
        EmbedderSpec::Synthetic { dim, seed } => Arc::new(SyntheticEmbedder::new(*dim, *seed)),
        EmbedderSpec::Table {
            path,
            unit_norm,
            max_input_tokens,
        } => Arc::new(TableEncoder::load(path, *unit_norm, *max_input_tokens)?),
        EmbedderSpec::Remote {
            model,
            dim,
            unit_norm,
            batch_size,
            max_in_flight,
        } => Arc::new(
            RemoteEmbedder::new(RemoteEndpoint::from_env(model.clone())?, *dim, *unit_norm)?
                .with_batching(*batch_size, *max_in_flight),
        ),
    })
}

/// The dataset's embedder, memoized through the dataset cache.
fn cached_embedder(spec: &EmbedderSpec, dir: &Path) -> Result<(Arc<dyn Embedder>, Arc<EmbeddingCache>)> {
    let inner = raw_embedder(spec)?;
    let d = inner.descriptor().clone();
    let cache = Arc::new(EmbeddingCache::open(&dir.join(CACHE_FILE), &d.model_id, d.dimension)?);
    Ok((Arc::new(CachedEmbedder::new(inner, cache.clone())?), cache))
}

/// Everything a command needs from a dataset directory.
struct DatasetHandle {
    tokenizer: Arc<WordTokenizer>,
    embedder: Arc<dyn Embedder>,
    dataset: InversionDataset,
}

fn open_dataset(dir: &Path) -> Result<DatasetHandle> {
    let spec_path = dir.join(EMBEDDER_FILE);
    let raw = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: EmbedderSpec = serde_json::from_str(&raw)?;
    let (embedder, cache) = cached_embedder(&spec, dir)?;
    let tokenizer = Arc::new(WordTokenizer::load(&dir.join(TOKENIZER_FILE))?);
    let dataset = read_dataset_manifest(&dir.join(DATASET_FILE), &cache)?;
    if dataset.tokenizer_id != tokenizer.id() {
        return Err(Error::config(format!(
            "{} was built with tokenizer {}, found {}",
            dir.display(),
            dataset.tokenizer_id,
            tokenizer.id()
        )));
    }
    Ok(DatasetHandle {
        tokenizer,
        embedder,
        dataset,
    })
}

fn splits(cfg: &RunConfig, dataset: &InversionDataset) -> Result<(InversionDataset, InversionDataset)> {
    let (train, eval) = split_train_eval(&dataset.examples, cfg.dataset.eval_fraction, cfg.dataset.split_seed)?;
    Ok((dataset.with_examples(train), dataset.with_examples(eval)))
}

fn selected(cfg: &RunConfig, dataset: &InversionDataset) -> Result<InversionDataset> {
    let (train, eval) = splits(cfg, dataset)?;
    let base = match cfg.eval.split {
        Split::Train => train,
        Split::Eval => eval,
        Split::All => dataset.clone(),
    };
    let rows: Vec<_> = base
        .examples
        .into_iter()
        .skip(cfg.eval.offset)
        .take(cfg.eval.limit.unwrap_or(usize::MAX))
        .collect();
    if rows.is_empty() {
        return Err(Error::config("evaluation selection is empty (check eval.split/offset/limit)"));
    }
    Ok(dataset.with_examples(rows))
}

pub fn build_dataset(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec = cfg
        .embedder
        .as_ref()
        .ok_or_else(|| Error::config("missing required key `embedder`"))?;
    let corpus_path = match (&cfg.dataset.corpus, &cfg.dataset.synthetic) {
        (Some(p), _) => p.clone(),
        (None, Some(s)) => {
            let docs = synthetic_corpus(s.count, s.vocab, s.min_len, s.max_len, s.seed)?;
            let p = out.join("corpus.jsonl");
            write_corpus(&p, &docs)?;
            p
        }
        (None, None) => {
            return Err(Error::config(
                "missing required key `dataset.corpus` (or `dataset.synthetic`)",
            ))
        }
    };
    let tokenizer_spec = TokenizerSpec::parse(&cfg.dataset.tokenizer)?;
    let report = ingest_corpus(&corpus_path, &tokenizer_spec, cfg.dataset.max_tokens)?;
    report.tokenizer.save(&out.join(TOKENIZER_FILE))?;
    write_json(&out.join(EMBEDDER_FILE), spec)?;
    let (_, cache) = cached_embedder(spec, out)?;
    let inner = raw_embedder(spec)?;
    let dataset = build_inversion_dataset(
        &report.documents,
        &report.tokenizer,
        cfg.dataset.max_tokens,
        inner.as_ref(),
        Some(&cache),
    )?;
    cache.flush()?;
    write_dataset_manifest(&out.join(DATASET_FILE), &dataset)?;
    write_json(
        &out.join("ingest.json"),
        &serde_json::json!({
            "corpus": corpus_path,
            "documents": dataset.len(),
            "malformed_lines": report.malformed_lines,
            "dropped_empty": report.dropped_empty,
            "tokenizer_id": report.tokenizer.id(),
            "cache_entries": cache.len(),
        }),
    )?;
    tracing::info!(documents = dataset.len(), out = %out.display(), "dataset built");
    Ok(())
}

fn model_config(cfg: &RunConfig, data: &DatasetHandle, feedback: bool) -> InverterConfig {
    let m = &cfg.model;
    let mut c = InverterConfig::new(
        data.tokenizer.id(),
        data.tokenizer.vocab_size(),
        data.embedder.descriptor().clone(),
        data.dataset.max_tokens,
    );
    c.d_model = m.d_model;
    c.heads = m.heads;
    c.encoder_layers = m.encoder_layers;
    c.decoder_layers = m.decoder_layers;
    c.ff_hidden = m.ff_hidden;
    c.projection_len = m.projection_len;
    c.feedback = feedback;
    c
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let role = cfg
        .train
        .role
        .ok_or_else(|| Error::config("missing required key `train.role` (or --role)"))?;
    let data = open_dataset(cfg.dataset_dir()?)?;
    let (train_set, eval_set) = splits(cfg, &data.dataset)?;
    let empty = empty_embedding(data.embedder.as_ref())?;
    let hp = cfg.train.hyperparams();
    let ckpt = out.join("checkpoint");
    let metrics_path = out.join("metrics.jsonl");
    let mut log = BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?,
    );

    let (train_pairs, eval_pairs, config) = match role {
        ModelRole::Base => (
            embinv::models::base_pairs(&train_set, &empty),
            embinv::models::base_pairs(&eval_set, &empty),
            model_config(cfg, &data, true),
        ),
        ModelRole::Corrector => {
            let base_dir = cfg
                .train
                .base
                .as_deref()
                .ok_or_else(|| Error::config("missing required key `train.base` for the corrector role"))?;
            let base = load_inverter(base_dir)?;
            let mut train_h = generate_hypothesis_dataset(&base, &data.tokenizer, &train_set, data.embedder.as_ref())?;
            let eval_h = generate_hypothesis_dataset(&base, &data.tokenizer, &eval_set, data.embedder.as_ref())?;
            train_h.extend(augment_hypotheses(
                &train_set,
                &data.tokenizer,
                data.embedder.as_ref(),
                &cfg.train.augment,
            )?);
            let fb = cfg.train.feedback;
            (
                embinv::models::corrector_pairs(&train_h, fb),
                embinv::models::corrector_pairs(&eval_h, fb),
                model_config(cfg, &data, fb),
            )
        }
    };

    let mut trainer = if cfg.train.resume && ckpt.join("config.json").exists() {
        let mut t = Trainer::load(&ckpt)?;
        t.hyperparams.max_steps = hp.max_steps;
        t.hyperparams.epochs = hp.epochs;
        if t.inverter.role != role {
            return Err(Error::config(format!("{} holds a {:?} model", ckpt.display(), t.inverter.role)));
        }
        tracing::info!(step = t.state.step, "resuming");
        t
    } else {
        Trainer::new(Inverter::new(role, config, empty, hp.seed)?, hp)?
    };
    trainer.train(&train_pairs, &eval_pairs, Some(&mut log))?;
    trainer.save(&ckpt)?;
    tracing::info!(step = trainer.state.step, checkpoint = %ckpt.display(), "training finished");
    Ok(())
}

fn load_stack(cfg: &RunConfig, tokenizer: &Arc<WordTokenizer>) -> Result<ModelStack> {
    let corrector = cfg
        .search
        .corrector
        .as_deref()
        .ok_or_else(|| Error::config("missing required key `search.corrector`"))?;
    let base = cfg.search.base.as_deref().map(load_inverter).transpose()?.map(Arc::new);
    ModelStack::new(base, Arc::new(load_inverter(corrector)?), tokenizer.clone())
}

fn build_methods(cfg: &RunConfig, data: &DatasetHandle, rounds: usize) -> Result<Vec<(String, Box<dyn InversionMethod>)>> {
    let s = &cfg.search;
    if s.method != MethodKind::Correction {
        let base = s
            .base
            .as_deref()
            .ok_or_else(|| Error::config("missing required key `search.base`"))?;
        let strategy = match s.method {
            MethodKind::BaseGreedy => DecodeStrategy::Greedy,
            MethodKind::BaseBeam => DecodeStrategy::Beam { width: s.beam_width },
            _ => DecodeStrategy::Nucleus {
                top_p: s.top_p,
                seed: s.seed,
            },
        };
        let method = BaseDecode {
            model: Arc::new(load_inverter(base)?),
            tokenizer: data.tokenizer.clone(),
            strategy,
            num_return: s.num_return,
            rerank: s.rerank,
        };
        return Ok(vec![(String::new(), Box::new(method))]);
    }
    let stack = load_stack(cfg, &data.tokenizer)?;
    if s.feedback && !stack.corrector.config().feedback {
        return Err(Error::config("corrector was trained without feedback; set search.feedback = false"));
    }
    let inits: Vec<String> = if s.inits.is_empty() {
        vec![s.init.clone()]
    } else {
        s.inits.clone()
    };
    let sweep = inits.len() > 1;
    inits
        .iter()
        .enumerate()
        .map(|(i, init)| {
            let config = BeamConfig {
                width: s.beam_width,
                max_rounds: rounds,
                feedback_enabled: s.feedback,
                initializer: Initializer::parse(init)?,
                seed: s.seed,
            };
            config.validate()?;
            let label = if sweep { format!("init-{i}") } else { String::new() };
            Ok((
                label,
                Box::new(CorrectionSearch {
                    stack: stack.clone(),
                    config,
                }) as Box<dyn InversionMethod>,
            ))
        })
        .collect()
}

fn eval_options(cfg: &RunConfig, keep_traces: bool) -> EvalOptions {
    EvalOptions {
        f1_mode: cfg.eval.f1_mode,
        keep_records: cfg.eval.records,
        keep_traces,
        workers: cfg.workers,
    }
}

/// `invert` and `evaluate` share this; `evaluate` adds plots and name recovery.
pub fn invert(cfg: &RunConfig, extended: bool) -> Result<()> {
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = open_dataset(cfg.dataset_dir()?)?;
    let selection = selected(cfg, &data.dataset)?;
    let mut summary = String::new();
    for (label, method) in build_methods(cfg, &data, cfg.search.rounds)? {
        let dir: PathBuf = if label.is_empty() { out.to_path_buf() } else { out.join(&label) };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let run = evaluate_dataset(
            method.as_ref(),
            &selection,
            data.embedder.clone(),
            &data.tokenizer,
            &eval_options(cfg, true),
        )?;
        if !run.traces.is_empty() {
            write_traces(&dir.join("traces.jsonl"), &run.traces)?;
        }
        run.report.write(&dir.join("report.json"), &dir.join("report.txt"))?;
        if extended {
            if let Some(svg) = run.report.scatter_plot() {
                write_svg(&dir.join("cosine_vs_bleu.svg"), &svg)?;
            }
            if selection.examples.iter().any(|e| e.name_spans.is_some()) {
                if let Some(records) = &run.report.records {
                    let by_id: HashMap<&str, &str> =
                        records.iter().map(|r| (r.doc_id.as_str(), r.prediction.as_str())).collect();
                    let preds: Vec<String> = selection
                        .examples
                        .iter()
                        .map(|e| by_id.get(e.doc_id.as_str()).copied().unwrap_or("").to_string())
                        .collect();
                    let names: Vec<_> = selection.examples.iter().map(|e| e.name_spans.clone()).collect();
                    let mut nr = name_recovery(&preds, &names)?;
                    nr.reconstruction = Some(run.report.clone());
                    write_json(&dir.join("names.json"), &nr)?;
                }
            }
        }
        tracing::info!(method = %run.report.method, exact = run.report.exact, bleu = run.report.bleu, "evaluated");
        summary.push_str(&run.report.to_table());
    }
    std::fs::write(out.join("summary.txt"), summary).map_err(|e| Error::io(out, e))
}

pub fn defend(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = open_dataset(cfg.dataset_dir()?)?;
    let selection = selected(cfg, &data.dataset)?;
    let task = match &cfg.defense.retrieval {
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<RetrievalTask>(&raw)?
        }
        None => {
            let docs: Vec<Document> = selection
                .examples
                .iter()
                .map(|e| Document {
                    doc_id: e.doc_id.clone(),
                    text: e.tokens.text.clone(),
                    name_spans: None,
                })
                .collect();
            RetrievalTask::self_retrieval("self-retrieval", &docs)
        }
    };
    let mut methods = build_methods(cfg, &data, cfg.defense.rounds)?;
    let (_, method) = methods.remove(0);
    let points = noise_sweep(
        data.embedder.clone(),
        &cfg.defense.lambdas,
        cfg.defense.noise_seed,
        &selection,
        &task,
        method.as_ref(),
        &data.tokenizer,
        &eval_options(cfg, false),
    )?;
    write_tradeoff(out, &points)
}

pub fn analyze(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let kind = cfg
        .analyze
        .kind
        .ok_or_else(|| Error::config("missing required key `analyze.kind` (or --kind)"))?;
    let read_report = || -> Result<ReconstructionReport> {
        let p = cfg
            .analyze
            .report
            .as_deref()
            .ok_or_else(|| Error::config("missing required key `analyze.report`"))?;
        let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Ok(serde_json::from_str(&raw)?)
    };
    match kind {
        AnalysisKind::HypothesisCloseness => {
            let data = open_dataset(cfg.dataset_dir()?)?;
            let selection = selected(cfg, &data.dataset)?;
            let base_dir = cfg
                .search
                .base
                .as_deref()
                .ok_or_else(|| Error::config("missing required key `search.base`"))?;
            let base = load_inverter(base_dir)?;
            let records = generate_hypothesis_dataset(&base, &data.tokenizer, &selection, data.embedder.as_ref())?;
            let hist = analyze_hypothesis_closeness(&records, cfg.analyze.bins)?;
            write_json(&out.join("closeness.json"), &hist)?;
            let labels: Vec<String> = hist.bin_edges.iter().map(|e| format!("{e:.2}")).collect();
            let svg = bar_chart(
                &format!("cos(e, φ(x⁰)), mean {:.3}", hist.mean),
                "cosine",
                "examples",
                &labels,
                &[("examples".into(), hist.counts.iter().map(|&c| c as f64).collect())],
            );
            write_svg(&out.join("closeness.svg"), &svg)
        }
        AnalysisKind::Frequency => {
            let report = read_report()?;
            let records = report
                .records
                .ok_or_else(|| Error::config("report has no per-example records (set eval.records = true)"))?;
            let corpus = cfg
                .analyze
                .train_corpus
                .as_deref()
                .ok_or_else(|| Error::config("missing required key `analyze.train_corpus`"))?;
            let (docs, _) = read_corpus(corpus)?;
            let counts = word_counts(docs.iter().map(|d| d.text.as_str()));
            let preds: Vec<String> = records.iter().map(|r| r.prediction.clone()).collect();
            let refs: Vec<String> = records.iter().map(|r| r.reference.clone()).collect();
            let buckets = frequency_bucketed_accuracy(&preds, &refs, &counts)?;
            write_json(&out.join("frequency.json"), &buckets)?;
            write_svg(&out.join("frequency.svg"), &buckets.plot())
        }
        AnalysisKind::Scatter => {
            let report = read_report()?;
            let svg = report
                .scatter_plot()
                .ok_or_else(|| Error::config("report has no per-example records (set eval.records = true)"))?;
            write_svg(&out.join("cosine_vs_bleu.svg"), &svg)
        }
    }
}

/// Writes `manifest.json`: command line, resolved config, code version.
pub fn write_manifest(cfg: &RunConfig, command: &str) -> Result<()> {
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = serde_json::json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "code_version": code_version(),
        "config": cfg,
    });
    let path = out.join("manifest.json");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}

fn code_version() -> String {
    let pkg = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| format!("{pkg}+{}", String::from_utf8_lossy(&o.stdout).trim()))
        .unwrap_or_else(|| pkg.to_string())
}
