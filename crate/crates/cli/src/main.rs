//! `actret`: generate data, train, extract embeddings, evaluate retrieval and
//! draw result montages.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actret_core::config::RunConfig;
use actret_core::dataset::{annotation_path, generate_synthetic, load_manifest, manifest_checksum, Split};
use actret_core::fusion::{PositionalMode, TypeMode};
use actret_core::montage::{render_montage, save_png, MontageLayout};
use actret_core::pipeline::retrieve_evaluate;
use actret_core::retrieval::{extract_embeddings, parse_ranked_lists, ranked_lists_to_jsonl, EmbeddingStore};
use actret_core::training::{train, Checkpoint};
use actret_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Environment variable that fixes the worker thread count.
const THREADS_ENV: &str = "ACTRET_THREADS";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "actret", version, about = "Region-aware action retrieval pipeline")]
struct Cli {
    /// TOML run configuration; the desk preset is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    Generate(GenerateArgs),
    /// Train and write a checkpoint plus an epoch log.
    Train(TrainArgs),
    /// Embed one split with a checkpoint.
    Extract(ExtractArgs),
    /// Rank every query against the rest and score the rankings.
    RetrieveEvaluate(RetrieveArgs),
    /// Draw query and result tiles from a ranked-list export.
    Montage(MontageArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    persons_per_image: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory or annotation file.
    #[arg(long)]
    data: PathBuf,
    /// Class names file; defaults to `classes.txt` next to the annotations.
    #[arg(long)]
    classes_file: Option<PathBuf>,
    #[arg(long)]
    no_anchored: bool,
    #[arg(long)]
    no_global: bool,
    #[arg(long)]
    no_contextual: bool,
    #[arg(long)]
    no_pos: bool,
    #[arg(long)]
    no_type: bool,
    /// Transformer blocks.
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long, required_unless_present = "embeddings")]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "embeddings")]
    data: Option<PathBuf>,
    /// Use a stored embedding file instead of a checkpoint and dataset.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Apply k-reciprocal reranking.
    #[arg(long)]
    rerank: bool,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Results kept per query in the ranked-list export.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct MontageArgs {
    /// Ranked-list export from `retrieve-evaluate`.
    #[arg(long)]
    ranked: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Image file to write; defaults to `<out>/montage.png`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Results per row.
    #[arg(long, default_value_t = 8)]
    limit: usize,
    /// Rows to draw, in export order.
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long, default_value_t = 64)]
    tile: u32,
}

type CliResult<T> = Result<T, Error>;

fn base_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> CliResult<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn load_data(data: &Path, classes: Option<&Path>) -> CliResult<actret_core::dataset::DatasetManifest> {
    load_manifest(&annotation_path(data), classes)
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> CliResult<()> {
    let mut cfg = base_config(cli)?;
    if let Some(c) = args.classes {
        cfg.synthetic.classes = c;
    }
    if let Some(n) = args.per_class {
        cfg.synthetic.images_per_class = n;
    }
    if let Some(s) = args.image_size {
        cfg.synthetic.image_size = s;
    }
    if let Some(p) = args.persons_per_image {
        cfg.synthetic.persons_per_image = p;
    }
    cfg.synthetic.validate()?;
    let dir = out_dir(cli, "data")?;
    let manifest = generate_synthetic(&cfg.synthetic, cfg.seed, &dir)?;
    let checksum = manifest_checksum(&annotation_path(&dir))?;
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "dataset": dir,
        "samples": manifest.samples.len(),
        "classes": manifest.num_classes(),
        "checksum": checksum,
    }));
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> CliResult<()> {
    let mut cfg = base_config(cli)?;
    let tokens = &mut cfg.fusion.tokens;
    tokens.anchored &= !args.no_anchored;
    tokens.global &= !args.no_global;
    tokens.contextual &= !args.no_contextual;
    if args.no_pos {
        cfg.fusion.positional_mode = PositionalMode::Disabled;
    }
    if args.no_type {
        cfg.fusion.type_mode = TypeMode::Disabled;
    }
    if let Some(b) = args.blocks {
        cfg.fusion.blocks = b;
    }
    if let Some(e) = args.epochs {
        cfg.training.max_epochs = e;
    }
    cfg.validate()?;
    let manifest = load_data(&args.data, args.classes_file.as_deref())?;
    let dir = out_dir(cli, "out")?;
    let log_path = dir.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut log_err = None;
    let outcome = train(&manifest, &cfg, |r| {
        let line = json!({
            "schema_version": SCHEMA_VERSION,
            "epoch": r.epoch,
            "train_loss": r.train_loss,
            "val_map": r.val_map,
            "lr": r.lr,
            "seconds": r.seconds,
        });
        if let Err(e) = writeln!(log_file, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path, e));
    }
    let ckpt_path = dir.join("checkpoint.ackpt");
    Checkpoint::from_model(&outcome.model, &manifest.class_names, outcome.best_epoch, &outcome.history).save(&ckpt_path)?;
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "checkpoint": ckpt_path,
        "log": log_path,
        "best_epoch": outcome.best_epoch,
        "best_val_map": outcome.best_val_map,
        "epochs_run": outcome.history.len(),
        "tokens": outcome.model.config.fusion.token_count(),
    }));
    Ok(())
}

fn load_model(path: &Path) -> CliResult<(actret_core::model::ActionModel, Vec<String>)> {
    let ckpt = Checkpoint::load(path)?;
    let names = ckpt.class_names.clone();
    Ok((ckpt.into_model()?, names))
}

fn cmd_extract(cli: &Cli, args: &ExtractArgs) -> CliResult<()> {
    let (model, _) = load_model(&args.checkpoint)?;
    let manifest = load_data(&args.data, None)?;
    let store = extract_embeddings(&model, &manifest, args.split.into())?;
    let dir = out_dir(cli, "out")?;
    let path = dir.join("embeddings.aemb");
    write_file(&path, store.encode())?;
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "embeddings": path,
        "count": store.len(),
        "dim": store.dim(),
    }));
    Ok(())
}

fn cmd_retrieve(cli: &Cli, args: &RetrieveArgs) -> CliResult<()> {
    let (store, mut cfg, class_names) = match (&args.embeddings, &args.checkpoint, &args.data) {
        (Some(p), _, _) => {
            let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
            (EmbeddingStore::decode(&bytes)?, base_config(cli)?, Vec::new())
        }
        (None, Some(ck), Some(data)) => {
            let (model, names) = load_model(ck)?;
            let manifest = load_data(data, None)?;
            let store = extract_embeddings(&model, &manifest, args.split.into())?;
            let mut cfg = model.config.clone();
            if cli.config.is_some() {
                let file = base_config(cli)?;
                cfg.rerank = file.rerank;
                cfg.retrieval = file.retrieval;
            }
            (store, cfg, names)
        }
        _ => return Err(Error::Config("need --embeddings or both --checkpoint and --data".into())),
    };
    if let Some(k1) = args.k1 {
        cfg.rerank.k1 = k1;
    }
    if let Some(k2) = args.k2 {
        cfg.rerank.k2 = k2;
    }
    if let Some(l) = args.lambda {
        cfg.rerank.lambda = l;
    }
    if let Some(l) = args.limit {
        cfg.retrieval.limit = l;
    }
    cfg.retrieval.rerank |= args.rerank;
    cfg.validate()?;
    let outcome = retrieve_evaluate(&store, cfg.retrieval.rerank.then_some(&cfg.rerank))?;
    let dir = out_dir(cli, "out")?;
    let metrics_path = dir.join("metrics.json");
    let ranked_path = dir.join("ranked_lists.jsonl");
    let doc = outcome.to_json(&class_names, &cfg);
    write_file(&metrics_path, format!("{}\n", serde_json::to_string_pretty(&doc).expect("json")))?;
    write_file(&ranked_path, ranked_lists_to_jsonl(&outcome.lists, cfg.retrieval.limit))?;
    let m = &outcome.metrics;
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "metrics": metrics_path,
        "ranked_lists": ranked_path,
        "map": m.map,
        "rank1": m.rank1,
        "rank5": m.rank5,
    }));
    Ok(())
}

fn cmd_montage(cli: &Cli, args: &MontageArgs) -> CliResult<()> {
    let text = fs::read_to_string(&args.ranked).map_err(|e| io_err(&args.ranked, e))?;
    let mut lists = parse_ranked_lists(&text)?;
    if let Some(q) = args.queries {
        lists.truncate(q);
    }
    let manifest = load_data(&args.data, None)?;
    let img = render_montage(
        &lists,
        &manifest,
        MontageLayout {
            tile: args.tile,
            results: args.limit,
        },
    )?;
    let path = match &args.output {
        Some(p) => p.clone(),
        None => out_dir(cli, "out")?.join("montage.png"),
    };
    save_png(&img, &path)?;
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "montage": path,
        "rows": lists.len(),
        "columns": 1 + args.limit,
    }));
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Generate(a) => cmd_generate(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Extract(a) => cmd_extract(cli, a),
        Command::RetrieveEvaluate(a) => cmd_retrieve(cli, a),
        Command::Montage(a) => cmd_montage(cli, a),
    }
}

/// Collapse a message onto one line.
fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
