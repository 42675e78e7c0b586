use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use mrnn_core::config::{Benchmark, RunConfig};
use mrnn_core::dataset::{Dataset, Query, Subset};
use mrnn_core::diffcore::Mode;
use mrnn_core::embeddings::Embedder;
use mrnn_core::evalrank::{rank_all, EvalReport, RankedList};
use mrnn_core::gradsuite;
use mrnn_core::model::Mrnn;
use mrnn_core::training::{self, write_metrics_csv, Checkpoint};

use crate::heatmap::{self, TraceExport};
use crate::ingest::{self, Format, Inputs};
use crate::synth::{self, SynthSettings};
use crate::{EvalArgs, ExportArgs, GradArgs, IngestArgs, InitArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Loads and validates a config; relative paths resolve against its directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    config.resolve_paths(base);
    Ok(config)
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let path = config
        .paths
        .dataset
        .as_ref()
        .ok_or_else(|| anyhow!("config has no paths.dataset"))?;
    Ok(Dataset::load(path)?)
}

fn load_embedder(config: &RunConfig, dataset: &Dataset) -> Result<Embedder> {
    Ok(Embedder::from_config(&config.embedding, &dataset.train_documents())?)
}

fn out_dir(config: &RunConfig, flag: Option<&PathBuf>) -> Result<PathBuf> {
    flag.or(config.paths.out.as_ref())
        .cloned()
        .ok_or_else(|| anyhow!("no output directory: pass --out or set paths.out"))
}

fn load_model(config: &RunConfig, checkpoint: Option<&PathBuf>, embedder: &Embedder) -> Result<Mrnn> {
    let path = match checkpoint {
        Some(p) => p.clone(),
        None => out_dir(config, None)?.join(CHECKPOINT_FILE),
    };
    let model = Checkpoint::load(&path)?.to_model()?;
    if model.input_dim != embedder.dim() {
        bail!(
            "{} expects {}-dim token vectors but the configured embedding produces {}",
            path.display(),
            model.input_dim,
            embedder.dim()
        );
    }
    Ok(model)
}

fn write_output(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub fn ingest(args: &IngestArgs) -> Result<ExitCode> {
    let format: Format = args.format.parse()?;
    let inputs = Inputs {
        input: args.input.as_deref(),
        train: args.train.as_deref(),
        valid: args.valid.as_deref(),
        test: args.test.as_deref(),
    };
    let (dataset, report) = ingest::ingest(format, &inputs)?;
    dataset.save(&args.out)?;
    eprintln!("{report}");
    eprintln!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(args: &TrainArgs) -> Result<ExitCode> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    println!("mrnn train: {}", config.header());
    if args.dry_run {
        return Ok(ExitCode::SUCCESS);
    }
    let out = out_dir(&config, args.out.as_ref())?;
    let dataset = load_dataset(&config)?;
    let embedder = load_embedder(&config, &dataset)?;
    let outcome = training::train(&dataset, &embedder, &config.model, &config.train, config.train.seed, |row| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  recall@1 {:.4}  triplets {}  {:.1}s",
            row.epoch, row.loss, row.recall_at_1, row.triplets, row.seconds
        );
    })?;
    if outcome.skipped_queries > 0 {
        eprintln!("skipped {} training queries without both a positive and a negative", outcome.skipped_queries);
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ckpt)?;
    let metrics = out.join(METRICS_FILE);
    write_metrics_csv(&metrics, &outcome.log)?;
    println!("wrote {} and {}", ckpt.display(), metrics.display());
    Ok(ExitCode::SUCCESS)
}

fn ranked(args: &EvalArgs) -> Result<Vec<RankedList>> {
    let config = load_config(&args.config)?;
    let subset: Subset = args.subset.parse()?;
    let dataset = load_dataset(&config)?;
    let embedder = load_embedder(&config, &dataset)?;
    let model = load_model(&config, args.checkpoint.as_ref(), &embedder)?;
    let queries: Vec<&Query> = dataset.subset(subset).collect();
    if queries.is_empty() {
        bail!("dataset has no `{}` queries", args.subset);
    }
    Ok(rank_all(&model, &embedder, queries)?)
}

pub fn evaluate(args: &EvalArgs) -> Result<ExitCode> {
    let lists = ranked(args)?;
    let report = EvalReport::from_lists(&lists);
    eprintln!(
        "{} queries ({} without a relevant candidate excluded): recall@1 {:.4}  mrr {:.4}  map {:.4}",
        report.queries,
        report.excluded,
        report.recall_at(1).unwrap_or(0.0),
        report.mrr,
        report.map
    );
    write_output(args.out.as_ref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

pub fn rank(args: &EvalArgs) -> Result<ExitCode> {
    let lists = ranked(args)?;
    let mut text = String::new();
    for l in &lists {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    write_output(args.out.as_ref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

pub fn export_attention(args: &ExportArgs) -> Result<ExitCode> {
    let config = load_config(&args.config)?;
    let dataset = load_dataset(&config)?;
    let query = dataset
        .find(&args.query_id)
        .ok_or_else(|| anyhow!("unknown query id `{}`", args.query_id))?;
    let doc = query
        .candidates
        .iter()
        .find(|c| c.doc_id == args.doc_id)
        .ok_or_else(|| anyhow!("document `{}` is not a candidate of query `{}`", args.doc_id, args.query_id))?;
    let embedder = load_embedder(&config, &dataset)?;
    let model = load_model(&config, args.checkpoint.as_ref(), &embedder)?;
    let q = model.embed_query(&embedder, query)?;
    let d = model.embed_doc(&embedder, doc)?;
    let (_, trace) = model.forward_pair(&q, &d, Mode::Eval)?;
    let dir = match &args.out {
        Some(p) => p.clone(),
        None => out_dir(&config, None)?
            .join("attention")
            .join(format!("{}__{}", args.query_id, args.doc_id)),
    };
    let export = TraceExport {
        query_id: &query.query_id,
        doc_id: &doc.doc_id,
        query_tokens: &query.tokens[..q.shape()[0]],
        doc_tokens: &doc.tokens[..d.shape()[0]],
        model: &model.config,
        trace: &trace,
    };
    for path in heatmap::export(&dir, &export)? {
        println!("{}", path.display());
    }
    eprintln!("dist {:.6}", trace.dist);
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: &GradArgs) -> Result<ExitCode> {
    let report = gradsuite::run(args.seed)?;
    for case in &report.cases {
        let verdict = if case.report.passes(report.tolerance) { "ok" } else { "FAIL" };
        println!("{:<20} max rel {:.3e}  {verdict}", case.name, case.report.max_rel_error());
    }
    if let Some(path) = &args.out {
        write_output(Some(path), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    if report.passes() {
        println!("PASS: max relative error {:.3e} <= {:e}", report.max_rel_error(), report.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL: {} exceed {:e}", report.failures().join(", "), report.tolerance);
        Ok(ExitCode::from(1))
    }
}

pub fn synth(args: &SynthArgs) -> Result<ExitCode> {
    let mut settings = SynthSettings::default();
    if let Some(seed) = args.seed {
        settings.train.seed = seed;
    }
    synth::write(&args.out, &settings)?;
    println!("wrote {}", args.out.join("config.toml").display());
    Ok(ExitCode::SUCCESS)
}

pub fn init_config(args: &InitArgs) -> Result<ExitCode> {
    let bench: Benchmark = args.benchmark.parse()?;
    if args.layers == 0 {
        bail!("--layers must be positive");
    }
    let config = RunConfig::published_defaults(bench, synth::embedding_config(args.bundle.clone(), args.layers));
    config.validate()?;
    write_output(args.out.as_ref(), &config.to_toml())?;
    Ok(ExitCode::SUCCESS)
}
