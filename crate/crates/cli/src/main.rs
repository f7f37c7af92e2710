//! `gcl4sr`: prepare logs, build transition graphs, train, evaluate and
//! compare ablation variants.

mod lock;
mod manifest;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gcl4sr::corpus::{
    build_sequences, generate_synthetic, load_log, read_prepared, split_leave_one_out, write_prepared, LogFormat,
    SplitDataset, SynthConfig, Vocabulary, PREPARED_FILES,
};
use gcl4sr::encoders::ModelParams;
use gcl4sr::evalkit::{ablation_grid, evaluate, EvalConfig, EvalMode, GridRow, MetricReport};
use gcl4sr::numerics::Checkpoint;
use gcl4sr::trainer::{checkpoint_for, train_with, Ablation, TrainConfig};
use gcl4sr::witg::{build_witg, graph_stats, read_graph, write_graph, TransitionGraph};

use lock::OutDir;
use manifest::RunManifest;

const AFTER_HELP: &str = "\
Configuration precedence: built-in defaults < --config file < GCL4SR_<KEY> \
environment variables < command-line flags. Any config key can be set from \
the environment, e.g. GCL4SR_LEARNING_RATE=0.01 or GCL4SR_KS='[5, 10]'.";

#[derive(Parser)]
#[command(name = "gcl4sr", version, about = "Graph-contrastive sequential recommendation", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction log with a planted transition structure.
    Synth(SynthArgs),
    /// Filter a raw log to its k-core, build sequences and split them.
    Prepare(PrepareArgs),
    /// Build the weighted item transition graph from prepared training data.
    BuildGraph(BuildGraphArgs),
    /// Train a model and report held-out test metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on the validation or test targets.
    Eval(EvalArgs),
    /// Train every ablation variant with a shared seed and tabulate them.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Item i is followed by item i+1 (mod items).
    Cyclic,
    /// Every item has `fanout` random successors.
    Sparse,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "cyclic")]
    kind: SynthKind,
    #[arg(long, default_value_t = 10)]
    items: usize,
    #[arg(long, default_value_t = 20)]
    users: usize,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    /// Probability of replacing a planted transition with a uniform draw.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 2)]
    fanout: usize,
    /// Seed of the successor sets for `--kind sparse`.
    #[arg(long, default_value_t = 0)]
    structure_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PrepareArgs {
    /// Headerless `user, item, timestamp` log; `.csv` is comma separated,
    /// anything else tab separated.
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 5)]
    k_core: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: PathBuf,
    /// Graph written by `build-graph`; rebuilt from `--data` when omitted.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metric cutoffs, e.g. `--k 10,20`.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Repeat every variant for seeds `seed..seed+seeds`.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Kv,
    Table,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    mode: EvalMode,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Only consulted for `ks` when `--k` is absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "kv")]
    format: Format,
    /// Also write the report and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Prepare(a) => cmd_prepare(&a),
        Command::BuildGraph(a) => cmd_build_graph(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    };
    if let Err(e) = result {
        eprintln!("error: {}", error_chain(&e));
        std::process::exit(1);
    }
}

/// Context chain joined by `: `, skipping causes the previous message
/// already quotes.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !prev.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        prev = text;
    }
    out
}

fn write_text(out: &OutDir, manifest: &mut RunManifest, root: &Path, name: &str, text: &str) -> Result<()> {
    let path = out.path(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.artifact(root, &path)
}

fn load_config(path: Option<&Path>, seed: Option<u64>, ks: Option<&[usize]>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg = cfg.with_env_overrides(std::env::vars())?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(ks) = ks {
        cfg.ks = ks.to_vec();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: &Path, manifest: &mut RunManifest) -> Result<(Vocabulary, SplitDataset)> {
    let (vocab, seqs) = read_prepared(dir).with_context(|| format!("loading prepared data from {}", dir.display()))?;
    ensure!(!seqs.is_empty(), "{} holds no sequences", dir.display());
    manifest.input_files("data", dir, &PREPARED_FILES)?;
    Ok((vocab, split_leave_one_out(&seqs)))
}

fn load_graph(path: Option<&Path>, vocab: &Vocabulary, split: &SplitDataset, manifest: &mut RunManifest) -> Result<TransitionGraph> {
    let Some(path) = path else {
        manifest.stat("graph", "rebuilt from data");
        return Ok(build_witg(&split.train_sequences(), vocab.item_count()));
    };
    let graph = read_graph(path).with_context(|| format!("loading graph {}", path.display()))?;
    ensure!(
        graph.node_count() == vocab.item_count(),
        "graph {} has {} nodes but the data has {} items",
        path.display(),
        graph.node_count(),
        vocab.item_count()
    );
    manifest.input_file("graph", path)?;
    Ok(graph)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let out = OutDir::acquire(&a.out)?;
    let mut manifest = RunManifest::new("synth");
    manifest.seed(a.seed);
    let cfg = match a.kind {
        SynthKind::Cyclic => SynthConfig::cyclic(a.items, a.users, a.min_len, a.max_len, a.noise),
        SynthKind::Sparse => {
            SynthConfig::random_sparse(a.items, a.users, a.min_len, a.max_len, a.fanout, a.noise, a.structure_seed)
        }
    };
    let records = generate_synthetic(&cfg, a.seed)?;
    let mut text = String::new();
    for r in &records {
        writeln!(text, "{}\t{}\t{}", r.user, r.item, r.timestamp).unwrap();
    }
    manifest.stat("interactions", records.len());
    write_text(&out, &mut manifest, &a.out, "interactions.tsv", &text)?;
    manifest.write(&a.out)?;
    println!("wrote {} interactions to {}", records.len(), out.path("interactions.tsv").display());
    Ok(())
}

fn cmd_prepare(a: &PrepareArgs) -> Result<()> {
    let records = load_log(&a.log, LogFormat::from_path(&a.log))?;
    let (vocab, seqs) = build_sequences(&records, a.k_core)?;
    // Audit the k-core property on what will be written.
    let mut item_counts: HashMap<usize, usize> = HashMap::new();
    for s in &seqs {
        ensure!(s.items.len() >= a.k_core, "user {} kept with {} interactions", s.user, s.items.len());
        for &i in &s.items {
            *item_counts.entry(i).or_default() += 1;
        }
    }
    ensure!(item_counts.values().all(|&c| c >= a.k_core), "an item below {}-core survived filtering", a.k_core);

    let split = split_leave_one_out(&seqs);
    let out = OutDir::acquire(&a.out)?;
    let mut manifest = RunManifest::new("prepare");
    manifest.input_file("log", &a.log)?;
    write_prepared(&a.out, &vocab, &seqs, &split)?;
    for name in PREPARED_FILES {
        manifest.artifact(&a.out, &out.path(name))?;
    }
    let interactions: usize = seqs.iter().map(|s| s.items.len()).sum();
    let summary = [
        ("users", vocab.user_count()),
        ("items", vocab.item_count()),
        ("interactions", interactions),
        ("evaluable_users", split.evaluable_count()),
        ("train_only_users", split.short_count()),
    ];
    manifest.stat("k_core", a.k_core);
    for (k, v) in summary {
        manifest.stat(k, v);
        println!("{k} = {v}");
    }
    manifest.write(&a.out)
}

fn cmd_build_graph(a: &BuildGraphArgs) -> Result<()> {
    let mut manifest = RunManifest::new("build-graph");
    let (vocab, split) = load_data(&a.data, &mut manifest)?;
    let graph = build_witg(&split.train_sequences(), vocab.item_count());
    let out = OutDir::acquire(&a.out)?;
    let path = out.path("graph.txt");
    write_graph(&graph, &path)?;
    manifest.artifact(&a.out, &path)?;
    let stats = graph_stats(&graph).to_text();
    write_text(&out, &mut manifest, &a.out, "graph_stats.txt", &stats)?;
    manifest.write(&a.out)?;
    print!("{stats}");
    Ok(())
}

/// Trains `cfg` into `dir` and returns the test report of the best
/// checkpoint. Files: `config.toml`, `metrics.log` (written as training
/// progresses), `best.ckpt`, `last.ckpt`, `test_report.txt`.
fn train_into(
    out: &OutDir,
    root: &Path,
    sub: &str,
    cfg: &TrainConfig,
    split: &SplitDataset,
    graph: &TransitionGraph,
    manifest: &mut RunManifest,
) -> Result<MetricReport> {
    let dir = out.path(sub);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let file = |name: &str| dir.join(name);

    fs::write(file("config.toml"), cfg.to_toml()).with_context(|| format!("writing {}", file("config.toml").display()))?;
    manifest.artifact(root, &file("config.toml"))?;

    let log_path = file("metrics.log");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_err = None;
    let outcome = train_with(split, graph, cfg, &mut |line| {
        if line.starts_with("epoch=") || line.starts_with("early_stop") {
            eprintln!("{line}");
        }
        if log_err.is_none() {
            log_err = writeln!(log, "{line}").and_then(|_| log.flush()).err();
        }
    });
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    drop(log);
    let outcome = outcome?;
    manifest.artifact(root, &log_path)?;

    for (name, params, epoch) in [("best.ckpt", &outcome.best, outcome.best_epoch), ("last.ckpt", &outcome.last, outcome.epochs_run)] {
        checkpoint_for(params, &outcome.model, cfg, epoch).write(&file(name))?;
        manifest.artifact(root, &file(name))?;
    }
    let (report, _) = evaluate(&outcome.best, &outcome.model, split, graph, EvalMode::Test, &cfg.eval_config())?;
    fs::write(file("test_report.txt"), report.to_kv()).with_context(|| format!("writing {}", file("test_report.txt").display()))?;
    manifest.artifact(root, &file("test_report.txt"))?;
    manifest.stat(&format!("{}best_epoch", prefix(sub)), outcome.best_epoch);
    manifest.stat(&format!("{}epochs_run", prefix(sub)), outcome.epochs_run);
    Ok(report)
}

fn prefix(sub: &str) -> String {
    if sub.is_empty() {
        String::new()
    } else {
        format!("{sub}.")
    }
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed, a.k.as_deref())?;
    let mut manifest = RunManifest::new("train");
    manifest.seed(cfg.seed);
    manifest.config(cfg.to_toml());
    if let Some(p) = &a.config {
        manifest.input_file("config", p)?;
    }
    let (vocab, split) = load_data(&a.data, &mut manifest)?;
    let graph = load_graph(a.graph.as_deref(), &vocab, &split, &mut manifest)?;
    let out = OutDir::acquire(&a.out)?;
    let result = train_into(&out, &a.out, "", &cfg, &split, &graph, &mut manifest);
    // The manifest lists whatever was produced, even on failure.
    manifest.write(&a.out)?;
    print!("{}", result?.to_table());
    Ok(())
}

fn meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    let raw = ck.meta_value(key).with_context(|| format!("checkpoint lacks meta key {key}"))?;
    raw.parse().ok().with_context(|| format!("checkpoint meta {key} = {raw:?} is malformed"))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ks = match &a.k {
        Some(k) => k.clone(),
        None => load_config(a.config.as_deref(), None, None)?.ks,
    };
    let mut manifest = RunManifest::new("eval");
    let ck = Checkpoint::read(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    manifest.input_file("checkpoint", &a.checkpoint)?;
    let (model, params) = ModelParams::from_checkpoint(&ck)?;
    let cfg = EvalConfig {
        ks,
        seed: meta(&ck, "seed")?,
        depth: meta(&ck, "sample_depth")?,
        size: meta(&ck, "sample_size")?,
        weighted: meta(&ck, "weighted_edges")?,
    };
    manifest.seed(cfg.seed);
    let (vocab, split) = load_data(&a.data, &mut manifest)?;
    ensure!(
        model.item_count == vocab.item_count(),
        "checkpoint has {} items but the data has {}",
        model.item_count,
        vocab.item_count()
    );
    let graph = load_graph(a.graph.as_deref(), &vocab, &split, &mut manifest)?;
    let (report, _) = evaluate(&params, &model, &split, &graph, a.mode, &cfg)?;
    match a.format {
        Format::Kv => print!("{}", report.to_kv()),
        Format::Table => print!("{}", report.to_table()),
    }
    if let Some(dir) = &a.out {
        let out = OutDir::acquire(dir)?;
        write_text(&out, &mut manifest, dir, &format!("eval_{}.txt", a.mode.name()), &report.to_kv())?;
        manifest.write(dir)?;
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    ensure!(a.seeds >= 1, "--seeds must be at least 1");
    let base = load_config(a.run.config.as_deref(), a.run.seed, a.run.k.as_deref())?;
    let mut manifest = RunManifest::new("ablate");
    manifest.seed(base.seed);
    manifest.config(base.to_toml());
    if let Some(p) = &a.run.config {
        manifest.input_file("config", p)?;
    }
    let (vocab, split) = load_data(&a.run.data, &mut manifest)?;
    let graph = load_graph(a.run.graph.as_deref(), &vocab, &split, &mut manifest)?;
    let out = OutDir::acquire(&a.run.out)?;

    let mut rows: Vec<GridRow> =
        Ablation::ALL.iter().map(|v| GridRow { label: v.label().to_string(), reports: Vec::new() }).collect();
    let mut failures = Vec::new();
    for seed in base.seed..base.seed + a.seeds {
        for (slot, variant) in Ablation::ALL.into_iter().enumerate() {
            let cfg = TrainConfig { seed, ablation: variant, ..base.clone() };
            let sub = format!("{}-seed{seed}", variant.key());
            eprintln!("== {sub}");
            match train_into(&out, &a.run.out, &sub, &cfg, &split, &graph, &mut manifest) {
                Ok(report) => rows[slot].reports.push(report),
                Err(e) => {
                    let msg = format!("{sub}: {}", error_chain(&e));
                    eprintln!("error: {msg}");
                    fs::write(out.path(&sub).join("error.txt"), format!("{msg}\n")).ok();
                    failures.push(msg);
                }
            }
            // Rewritten after every variant so a later failure keeps earlier rows.
            fs::write(out.path("ablation_grid.txt"), ablation_grid(&rows)).context("writing ablation_grid.txt")?;
        }
    }
    manifest.artifact(&a.run.out, &out.path("ablation_grid.txt"))?;
    for f in &failures {
        manifest.stat("failed", f);
    }
    manifest.write(&a.run.out)?;
    print!("{}", ablation_grid(&rows));
    if !failures.is_empty() {
        bail!("{} of {} variant runs failed: {}", failures.len(), rows.len() as u64 * a.seeds, failures.join("; "));
    }
    Ok(())
}
