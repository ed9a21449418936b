//! `chim`: train, sweep, check and inspect attribute-injected classifiers.

use chim::attribute::count_parameters;
use chim::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use chim::config::{InjectionSite, RepresentationKind};
use chim::data::{
    corpus_stats, generate_synthetic, generate_transfer_synthetic, load_corpus, load_reviews,
    load_transfer_records, make_disjoint_entity_split, make_twenty_core_split, write_corpus,
    write_transfer_records, Corpus, CorpusFormat, CorpusPaths, EncodedCorpus, SplitRatios,
    SyntheticSpec, TransferSpec,
};
use chim::experiment::{
    cells_csv, dedup_cells, heatmap_csv, joint_heatmap, run_sweep, run_training, Cell,
    ExperimentConfig, Ledger, LedgerRecord,
};
use chim::gradcheck::{check_model, standard_configurations, GradcheckSettings};
use chim::training::JsonlWriter;
use chim::transfer::{run_transfer, CategoryConfig, DecoderConfig, Features, FrozenEncodings, TransferTask};
use chim::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "chim", version, about = "Attribute-injected sentiment classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a checkpoint, per-epoch metrics and a ledger line.
    Train(TrainArgs),
    /// Train a grid of representation and site configurations.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients on tiny models.
    Gradcheck(GradcheckArgs),
    /// Reuse a checkpoint's user and product tables on category and headline tasks.
    Transfer(TransferArgs),
    /// Print parameter counts for a configuration.
    Params(ParamsArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
    /// Write a generated corpus to disk.
    Generate(GenerateArgs),
}

/// Where training data comes from.
#[derive(Args)]
struct DataArgs {
    /// Directory holding train.tsv, dev.tsv and test.tsv.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use the generated interaction corpus instead of files.
    #[arg(long)]
    synthetic: bool,
    /// TOML overrides for the generated corpus (users, products, ...).
    #[arg(long, requires = "synthetic")]
    synthetic_spec: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML experiment settings; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from 300-wide layers and chunk factor 15 instead of the
    /// 64-wide defaults.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ledger file; defaults to `<out>/ledger.jsonl`.
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// `comparison` (nine single-site cells), `joint` (CHIM singles and
    /// pairs), or a comma-separated list such as `chim:embed,chim:embed+encode`.
    #[arg(long, default_value = "joint")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the configured epoch limit.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only run configurations whose label contains this text.
    #[arg(long)]
    only: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Print every parameter group, not just the worst one.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct TransferArgs {
    /// Checkpoint of a model with user and product tables.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sidecar file: user, product, category, headline ids.
    #[arg(long)]
    records: PathBuf,
    /// category, headline or both.
    #[arg(long, default_value = "both")]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Classifier runs per encoding set.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Classify from the product vector alone instead of `[u; p]`.
    #[arg(long)]
    product_only: bool,
    /// Relative train, dev and test shares of users and products.
    #[arg(long, default_value = "8,1,1")]
    ratios: String,
    /// Headline subword vocabulary size.
    #[arg(long, default_value_t = 10_000)]
    vocab: usize,
    /// Decoder embedding and hidden width.
    #[arg(long, default_value_t = 300)]
    decoder_dim: usize,
    #[arg(long, default_value_t = 10)]
    decoder_epochs: usize,
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Override the representation (bias, matrix, chim).
    #[arg(long)]
    representation: Option<RepresentationKind>,
    /// Override the sites, comma-separated.
    #[arg(long, value_delimiter = ',')]
    sites: Vec<InjectionSite>,
    #[arg(long, default_value_t = 50_000)]
    vocab: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 1_000)]
    users: usize,
    #[arg(long, default_value_t = 1_000)]
    products: usize,
}

#[derive(Args)]
struct StatsArgs {
    /// Directory with train.tsv, dev.tsv and test.tsv.
    #[arg(long, conflicts_with = "file")]
    data: Option<PathBuf>,
    /// One unsplit review file, filtered and split before counting.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Minimum reviews per user and product when splitting `--file`.
    #[arg(long, default_value_t = 20)]
    core: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    /// `interaction` or `transfer`.
    #[arg(long, default_value = "interaction")]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit statuses.
const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CHECK: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) => EXIT_DATA,
        _ => EXIT_FAILURE,
    }
}

/// A run that finished but whose check did not pass.
struct CheckFailed(String);

enum Failure {
    Error(Error),
    Check(CheckFailed),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Params(a) => cmd_params(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Check(CheckFailed(m))) => {
            eprintln!("check failed: {m}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_config(args: &ConfigArgs) -> chim::Result<ExperimentConfig> {
    let base = if args.full_scale {
        ExperimentConfig::full_scale()
    } else {
        ExperimentConfig::default()
    };
    match &args.config {
        None => Ok(base),
        Some(path) => {
            // keys in the file override the chosen starting point
            let text = fs::read_to_string(path)?;
            let mut merged: toml::Table = toml::from_str(&base.to_toml()).expect("defaults parse");
            let file: toml::Table = toml::from_str(&text)
                .map_err(|e| config_error(format!("{}: {}", path.display(), e.message())))?;
            merged.extend(file);
            ExperimentConfig::from_toml(&toml::to_string(&merged).expect("table serializes"))
                .map_err(|e| config_error(format!("{}: {}", path.display(), strip_prefix(&e))))
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// The corpus plus a description for the ledger.
fn load_data(args: &DataArgs, config: &ExperimentConfig, seed: u64) -> chim::Result<(Corpus, serde_json::Value)> {
    match (&args.data, args.synthetic) {
        (Some(dir), false) => {
            let corpus = load_corpus(&CorpusPaths::in_dir(dir), CorpusFormat::new(config.num_classes))?;
            Ok((corpus, json!({"dir": dir.display().to_string()})))
        }
        (None, true) => {
            let spec = match &args.synthetic_spec {
                Some(p) => toml::from_str::<SyntheticSpec>(&fs::read_to_string(p)?)
                    .map_err(|e| config_error(format!("{}: {}", p.display(), e.message())))?,
                None => SyntheticSpec::default(),
            };
            let corpus = generate_synthetic(&spec, seed);
            Ok((corpus, json!({"synthetic": spec, "seed": seed})))
        }
        _ => Err(config_error("pass either --data DIR or --synthetic")),
    }
}

fn ledger_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.join("ledger.jsonl"))
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let config = load_config(&args.config)?;
    let (corpus, data) = load_data(&args.data, &config, args.seed)?;
    let enc = EncodedCorpus::build(&corpus, config.min_count);
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    fs::write(args.out.join("config.toml"), config.to_toml()).map_err(Error::from)?;
    let mut epochs = JsonlWriter::create(&args.out.join("epochs.jsonl"))?;
    let mut write_err = None;
    let run = run_training(&config, &enc, args.seed, &mut |e| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  dev acc {:.4}  rmse {:.4}  {:.1}s",
            e.epoch, e.loss, e.dev_acc, e.dev_rmse, e.seconds
        );
        if let Err(err) = epochs.write(e) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let manifest = Manifest {
        model: run.model.config().clone(),
        words: enc.words.clone(),
        users: enc.users.clone(),
        products: enc.products.clone(),
        label_offset: corpus.label_offset,
    };
    save_checkpoint(&args.out.join("checkpoint.bin"), &manifest, run.model.params())?;
    let metrics = json!({
        "data": data,
        "best_epoch": run.metrics.best_epoch,
        "epochs_run": run.metrics.epochs.len(),
        "stopped_early": run.metrics.stopped_early,
        "dev_accuracy": run.metrics.best_dev_accuracy,
        "dev_rmse": run.metrics.best_dev_rmse,
        "test_accuracy": run.test.map(|t| t.accuracy),
        "test_rmse": run.test.map(|t| t.rmse),
        "vector_coverage": run.vector_coverage,
        "checksum": run.model.params().checksum(),
    });
    Ledger::open(&ledger_path(&args.ledger, &args.out))?.append(&LedgerRecord::new(
        "train",
        config.hash(),
        args.seed,
        metrics,
    ))?;
    println!(
        "best dev accuracy {:.4} at epoch {}{}",
        run.metrics.best_dev_accuracy,
        run.metrics.best_epoch,
        run.test
            .map(|t| format!(", test accuracy {:.4}", t.accuracy))
            .unwrap_or_default()
    );
    Ok(())
}

fn parse_grid(grid: &str) -> chim::Result<Vec<Cell>> {
    match grid {
        "comparison" => Ok(Cell::comparison()),
        "joint" => Ok(Cell::joint_grid()),
        list => list.split(',').map(|c| c.trim().parse()).collect(),
    }
}

fn cmd_sweep(args: SweepArgs) -> Outcome {
    let mut config = load_config(&args.config)?;
    if let Some(e) = args.epochs {
        config.max_epochs = e;
    }
    config.validate()?;
    let requested = parse_grid(&args.grid)?;
    let (cells, repeats) = dedup_cells(&requested);
    for r in &repeats {
        eprintln!("warning: cell {r} requested more than once; running it once");
    }
    let (corpus, data) = load_data(&args.data, &config, args.seed)?;
    let enc = EncodedCorpus::build(&corpus, config.min_count);
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let results = run_sweep(&config, &enc, &cells, args.seed, &mut |cell, r| {
        eprintln!("{cell:<24} seed {:>3}  dev acc {:.4}", r.seed, r.dev_accuracy);
    })?;
    fs::write(args.out.join("cells.csv"), cells_csv(&results)).map_err(Error::from)?;
    let accs: Vec<(Cell, f64)> = results.iter().map(|(c, r)| (*c, r.dev_accuracy)).collect();
    let grid = joint_heatmap(&accs);
    let heatmap = heatmap_csv(&grid);
    fs::write(args.out.join("grid.csv"), &heatmap).map_err(Error::from)?;
    print!("{heatmap}");
    let metrics = json!({
        "data": data,
        "cells": results.iter().map(|(_, r)| r).collect::<Vec<_>>(),
        "grid": grid,
    });
    Ledger::open(&ledger_path(&args.ledger, &args.out))?.append(&LedgerRecord::new(
        "sweep",
        config.hash(),
        args.seed,
        metrics,
    ))?;
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Outcome {
    let settings = GradcheckSettings {
        tolerance: args.tolerance,
        ..GradcheckSettings::default()
    };
    let mut failed = Vec::new();
    let mut ran = 0;
    for (label, attrs) in standard_configurations() {
        if args.only.as_ref().is_some_and(|o| !label.contains(o.as_str())) {
            continue;
        }
        ran += 1;
        let report = check_model(&label, attrs, args.seed, &settings)?;
        let verdict = if report.passed() { "ok" } else { "FAIL" };
        println!("{label:<24} max rel error {:.2e}  {verdict}", report.max_rel_error());
        for g in &report.groups {
            if args.verbose || g.max_rel_error >= settings.tolerance {
                println!(
                    "    {:<28} {:>5} values  {:.2e}  (analytic {:.6e}, numeric {:.6e})",
                    g.name, g.values, g.max_rel_error, g.worst.0, g.worst.1
                );
            }
        }
        if !report.passed() {
            failed.push(label);
        }
    }
    if ran == 0 {
        return Err(config_error("no configuration matches --only").into());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(CheckFailed(format!(
            "{} configuration(s) at or above {:e}: {}",
            failed.len(),
            settings.tolerance,
            failed.join(", ")
        ))))
    }
}

fn parse_ratios(s: &str) -> chim::Result<SplitRatios> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_error(format!("ratios `{s}` should be three numbers like 8,1,1")))?;
    match v.as_slice() {
        [a, b, c] => Ok(SplitRatios::new(*a, *b, *c)),
        _ => Err(config_error(format!("ratios `{s}` should be three numbers like 8,1,1"))),
    }
}

fn cmd_transfer(args: TransferArgs) -> Outcome {
    let task: TransferTask = args.task.parse()?;
    let ratios = parse_ratios(&args.ratios)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let tag = format!("checkpoint:{}", &ck.params.checksum()[..12]);
    let (model, manifest) = ck.into_model()?;
    let label = model
        .config()
        .attributes
        .as_ref()
        .map(|a| {
            let sites: Vec<&str> = a.sites.iter().map(|s| s.label()).collect();
            format!("{}[{}] {tag}", a.kind, sites.join("+"))
        })
        .unwrap_or(tag);
    let learned = FrozenEncodings::from_model(&model, manifest.users, manifest.products, label)?;
    let records = load_transfer_records(&args.records)?;
    let split = make_disjoint_entity_split(&records, |r| (r.user.as_str(), r.product.as_str()), ratios, args.seed)?;
    eprintln!(
        "entity-disjoint split: {} / {} / {} records",
        split[0].len(),
        split[1].len(),
        split[2].len()
    );
    let category = CategoryConfig {
        runs: args.runs,
        features: if args.product_only { Features::Product } else { Features::Joint },
        ..CategoryConfig::default()
    };
    let decoder = DecoderConfig {
        vocab_size: args.vocab,
        embed_dim: args.decoder_dim,
        hidden_dim: args.decoder_dim,
        epochs: args.decoder_epochs,
        ..DecoderConfig::default()
    };
    let random = learned.random_like(args.seed);
    let mut reports = Vec::new();
    for enc in [&random, &learned] {
        let r = run_transfer(enc, &split, task, &category, &decoder, args.seed)?;
        if r.checksum != r.checksum_after {
            return Err(Failure::Check(CheckFailed(format!(
                "frozen encodings `{}` changed during transfer training",
                r.provenance
            ))));
        }
        reports.push(r);
    }
    println!("{:<40} {:>16} {:>12}", "encodings", "accuracy", "perplexity");
    if matches!(task, TransferTask::Category | TransferTask::Both) {
        let majority = chim::transfer::majority_baseline(&split[0], &split[2])?;
        println!("{:<40} {:>16} {:>12}", "majority", format!("{:.2}", 100.0 * majority), "-");
    }
    for r in &reports {
        let acc = r
            .category
            .as_ref()
            .map(|c| format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.std))
            .unwrap_or_else(|| "-".into());
        let ppl = r
            .headline
            .as_ref()
            .map(|h| format!("{:.2}", h.test_perplexity))
            .unwrap_or_else(|| "-".into());
        println!("{:<40} {acc:>16} {ppl:>12}", r.provenance);
    }
    let ledger = args
        .ledger
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_file_name("ledger.jsonl"));
    let hash = chim::experiment::canonical_hash(&json!({
        "task": task,
        "runs": args.runs,
        "product_only": args.product_only,
        "ratios": args.ratios,
        "decoder": decoder,
    }));
    Ledger::open(&ledger)?.append(&LedgerRecord::new(
        "transfer",
        hash,
        args.seed,
        json!({ "split": [split[0].len(), split[1].len(), split[2].len()], "reports": reports }),
    ))?;
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> Outcome {
    let mut config = load_config(&args.config)?;
    if let Some(k) = args.representation {
        config.representation = Some(k);
    }
    if !args.sites.is_empty() {
        config.sites = args.sites.clone();
    }
    config.validate()?;
    let mc = config.model_config(args.vocab, args.users + 1, args.products + 1, args.classes)?;
    let counts = count_parameters(&mc);
    for (name, n) in &counts.entries {
        println!("{name:<28} {n:>14}");
    }
    println!("{:<28} {:>14}", "attribute parameters", counts.attribute_total);
    println!("{:<28} {:>14}", "total", counts.total);
    if let Some(a) = mc.attributes.as_ref() {
        for &site in &a.sites {
            let (d1, d2) = mc.site_dims(site);
            let (c1, c2) = mc.site_chunks(site);
            let (m, c) = counts
                .generator_comparison
                .iter()
                .find(|(s, _, _)| *s == site)
                .map(|(_, m, c)| (*m, *c))
                .unwrap_or((0, 0));
            println!(
                "{site}: weight {d1}x{d2}, chunk {}x{}, matrix generator {m}, chim generator {c}, ratio {}",
                d1 / c1,
                d2 / c2,
                counts
                    .matrix_chim_ratio(site)
                    .map(|r| format!("{r}"))
                    .unwrap_or_else(|| "-".into())
            );
        }
    }
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Outcome {
    let format = CorpusFormat::new(args.classes);
    let corpus = match (&args.data, &args.file) {
        (Some(dir), None) => load_corpus(&CorpusPaths::in_dir(dir), format)?,
        (None, Some(file)) => {
            let raw = load_reviews(file, format)?;
            make_twenty_core_split(raw, args.core, SplitRatios::default(), args.classes, args.seed)?
        }
        _ => return Err(config_error("pass either --data DIR or --file FILE").into()),
    };
    let s = corpus_stats(&corpus);
    println!("classes            {}", s.classes);
    println!("train / dev / test {} / {} / {}", s.train, s.dev, s.test);
    println!("users              {}", s.users);
    println!("products           {}", s.products);
    println!("docs per user      {:.2}", s.docs_per_user);
    println!("docs per product   {:.2}", s.docs_per_product);
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Outcome {
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let paths = CorpusPaths::in_dir(&args.out);
    match args.kind.as_str() {
        "interaction" => write_corpus(&paths, &generate_synthetic(&SyntheticSpec::default(), args.seed))?,
        "transfer" => {
            let (corpus, records, _) = generate_transfer_synthetic(&TransferSpec::default(), args.seed);
            write_corpus(&paths, &corpus)?;
            write_transfer_records(&args.out.join("transfer.tsv"), &records)?;
        }
        other => {
            return Err(config_error(format!("unknown corpus kind `{other}` (expected interaction or transfer)")).into())
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
