// SPDX-License-Identifier: MIT OR Apache-2.0

//! `edgeprune`: batch frontend for data generation, toy-model training,
//! circuit discovery, evaluation and export.

mod run;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use edgeprune::baselines::{acdc, eap_scores, eap_top_k, EapMetric, EapOptions, EapPoint};
use edgeprune::export::{circuit_to_dot, faithfulness_csv};
use edgeprune::metrics::{edge_faithfulness, evaluate, EvalReport};
use edgeprune::model::{load_model, save_model, AblationMode, Circuit, DisentangledTransformer, ModelConfig};
use edgeprune::pruner::{
    prune_with_checkpoints, KlPositions, PruneCheckpoint, PruneConfig, PruneLoss, CHECKPOINT_FORMAT,
};
use edgeprune::tasks::{
    read_jsonl, train_toy_lm, ExamplePair, Splits, TaskData, TaskKind, TaskSpec, TrainConfig, BOY_NAMES, GIRL_NAMES,
    IOI_NAMES,
};
use edgeprune::zoo::Program;

use run::{record_input, sub_seed, Manifest, RunDir};

#[derive(Parser, Debug)]
#[command(
    name = "edgeprune",
    version,
    about = "Edge-level circuit discovery for small transformers"
)]
struct Cli {
    /// Seed from which every stage's randomness is derived.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Parent of the per-invocation run directory.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a task's splits as JSON lines plus its vocabulary.
    GenData(GenDataArgs),
    /// Train a small transformer on a task and save the checkpoint.
    TrainToy(TrainToyArgs),
    /// Write a compiled model with its ground-truth circuit and a dataset.
    Compile(CompileArgs),
    /// Edge Pruning.
    Prune(PruneArgs),
    /// Greedy edge ablation baseline.
    Acdc(AcdcArgs),
    /// Edge attribution patching baseline.
    Eap(EapArgs),
    /// Evaluate a circuit against its model.
    Eval(EvalArgs),
    /// Sparsity/faithfulness frontier of one method.
    Sweep(SweepArgs),
    /// Render a circuit as a Graphviz digraph.
    ExportDot(ExportDotArgs),
    /// Overlap of two circuits of the same model.
    Intersect(IntersectArgs),
    /// Per-edge ablation effect on the model and on the circuit.
    FaithfulnessScatter(FaithfulnessArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Task {
    Ioi,
    GreaterThan,
    GenderedPronoun,
    Boolean,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Ablation {
    Interchange,
    Zero,
}

impl From<Ablation> for AblationMode {
    fn from(a: Ablation) -> Self {
        match a {
            Ablation::Interchange => AblationMode::Interchange,
            Ablation::Zero => AblationMode::Zero,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    EdgePruning,
    Acdc,
    Eap,
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    task: Task,
    #[command(flatten)]
    gen: GenOptions,
}

#[derive(Args, Debug, Serialize)]
struct GenOptions {
    /// IOI and greater-than templates to draw from.
    #[arg(long)]
    n_templates: Option<usize>,
    /// IOI names to draw from.
    #[arg(long, default_value_t = 20)]
    n_names: usize,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    validation: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct TrainToyArgs {
    task: Task,
    /// Existing data directory; generated into the run directory if absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    gen: GenOptions,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 5000)]
    max_steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f32,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Stop once validation accuracy reaches this value.
    #[arg(long, default_value_t = 0.95)]
    accuracy_bar: f32,
}

#[derive(Args, Debug, Serialize)]
struct CompileArgs {
    program: String,
    /// Examples in the generated dataset.
    #[arg(long, default_value_t = 256)]
    n: usize,
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Model checkpoint (`model.json`).
    #[arg(long)]
    model: PathBuf,
    /// Directory holding `<split>.jsonl`.
    #[arg(long)]
    data: PathBuf,
    /// Split to fit on.
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args, Debug, Serialize, Clone)]
struct PruneOverrides {
    /// Named starting configuration: default, toy-ioi, compiled, gpt2.
    #[arg(long, default_value = "toy-ioi")]
    preset: String,
    /// JSON pruning configuration; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optimization steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Final edge sparsity target.
    #[arg(long)]
    target_sparsity: Option<f32>,
    /// Steps over which the target ramps up from 0.
    #[arg(long)]
    sparsity_warmup: Option<usize>,
    /// Learning rate of the mask parameters.
    #[arg(long)]
    lr_log_alpha: Option<f32>,
    /// Learning rate of the Lagrange multipliers.
    #[arg(long)]
    lr_lambda: Option<f32>,
    /// How removed edges are replaced.
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    /// Divergence to minimize: kl or mse.
    #[arg(long)]
    loss: Option<String>,
    /// Positions compared by the loss: all or answer.
    #[arg(long)]
    positions: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct PruneArgs {
    #[command(flatten)]
    io: DataArgs,
    #[command(flatten)]
    cfg: PruneOverrides,
    /// Write a mask checkpoint every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args, Debug, Serialize)]
struct AcdcArgs {
    #[command(flatten)]
    io: DataArgs,
    #[arg(long)]
    tau: f64,
    #[arg(long, value_enum, default_value = "interchange")]
    ablation: Ablation,
}

#[derive(Args, Debug, Serialize, Clone)]
struct EapFlags {
    /// Gradient point: clean or corrupted.
    #[arg(long, default_value = "corrupted")]
    point: String,
    /// Metric: kl or logit-diff.
    #[arg(long, default_value = "kl")]
    metric: String,
}

#[derive(Args, Debug, Serialize)]
struct EapArgs {
    #[command(flatten)]
    io: DataArgs,
    #[command(flatten)]
    flags: EapFlags,
    /// Number of edges to keep.
    #[arg(long, conflicts_with = "sparsity")]
    k: Option<usize>,
    /// Fraction of edges to drop.
    #[arg(long)]
    sparsity: Option<f32>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Circuit file (`circuit.json`).
    #[arg(long)]
    circuit: PathBuf,
    /// Model checkpoint (`model.json`).
    #[arg(long)]
    model: PathBuf,
    /// Task data directory from `gen-data`.
    #[arg(long)]
    task: PathBuf,
    /// Split to evaluate on.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value = "interchange")]
    ablation: Ablation,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Model checkpoint (`model.json`).
    #[arg(long)]
    model: PathBuf,
    /// Task data directory from `gen-data`.
    #[arg(long)]
    task: PathBuf,
    /// Target sparsities for edge-pruning and eap.
    #[arg(long, value_delimiter = ',')]
    sparsities: Vec<f32>,
    /// Thresholds for acdc.
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    /// Split each circuit is found on.
    #[arg(long, default_value = "train")]
    fit_split: String,
    /// Split each circuit is scored on.
    #[arg(long, default_value = "validation")]
    eval_split: String,
    #[command(flatten)]
    prune: PruneOverrides,
    #[command(flatten)]
    eap: EapFlags,
}

#[derive(Args, Debug, Serialize)]
struct ExportDotArgs {
    /// Circuit file (`circuit.json`).
    #[arg(long)]
    circuit: PathBuf,
    /// Model checkpoint (`model.json`).
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct IntersectArgs {
    /// First circuit file.
    #[arg(long)]
    a: PathBuf,
    /// Second circuit file.
    #[arg(long)]
    b: PathBuf,
    /// Model checkpoint (`model.json`).
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FaithfulnessArgs {
    /// Circuit file (`circuit.json`).
    #[arg(long)]
    circuit: PathBuf,
    #[command(flatten)]
    io: DataArgs,
}

fn main() {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(dir) => println!("run directory: {}", dir.display()),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

/// Validates inputs, creates the run directory, writes the manifest and
/// runs the command.
fn dispatch(cli: &Cli) -> Result<PathBuf> {
    let (name, config, inputs): (&str, serde_json::Value, Vec<&Path>) = match &cli.command {
        Command::GenData(a) => ("gen-data", serde_json::to_value(a)?, vec![]),
        Command::TrainToy(a) => (
            "train-toy",
            serde_json::to_value(a)?,
            a.data.iter().map(PathBuf::as_path).collect(),
        ),
        Command::Compile(a) => ("compile", serde_json::to_value(a)?, vec![]),
        Command::Prune(a) => {
            let mut v = vec![a.io.model.as_path(), a.io.data.as_path()];
            v.extend(a.cfg.config.as_deref());
            ("prune", serde_json::to_value(a)?, v)
        }
        Command::Acdc(a) => ("acdc", serde_json::to_value(a)?, vec![&a.io.model, &a.io.data]),
        Command::Eap(a) => ("eap", serde_json::to_value(a)?, vec![&a.io.model, &a.io.data]),
        Command::Eval(a) => ("eval", serde_json::to_value(a)?, vec![&a.circuit, &a.model, &a.task]),
        Command::Sweep(a) => {
            let mut v = vec![a.model.as_path(), a.task.as_path()];
            v.extend(a.prune.config.as_deref());
            ("sweep", serde_json::to_value(a)?, v)
        }
        Command::ExportDot(a) => ("export-dot", serde_json::to_value(a)?, vec![&a.circuit, &a.model]),
        Command::Intersect(a) => ("intersect", serde_json::to_value(a)?, vec![&a.a, &a.b, &a.model]),
        Command::FaithfulnessScatter(a) => (
            "faithfulness-scatter",
            serde_json::to_value(a)?,
            vec![&a.circuit, &a.io.model, &a.io.data],
        ),
    };
    let mut hashes = BTreeMap::new();
    for p in inputs {
        ensure!(p.exists(), "input {} does not exist", p.display());
        record_input(&mut hashes, p)?;
    }
    // Schema checks that need no computation happen before the run
    // directory exists.
    preflight(&cli.command)?;

    let dir = RunDir::create(&cli.out_dir, name)?;
    dir.write_json(
        "manifest.json",
        &Manifest {
            command: name.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            git_describe: run::git_describe(),
            seed: cli.seed,
            config,
            inputs: hashes,
        },
    )?;
    let seed = cli.seed;
    match &cli.command {
        Command::GenData(a) => gen_data(&dir, a, seed),
        Command::TrainToy(a) => train_toy(&dir, a, seed),
        Command::Compile(a) => compile(&dir, a, seed),
        Command::Prune(a) => prune_cmd(&dir, a, seed),
        Command::Acdc(a) => acdc_cmd(&dir, a),
        Command::Eap(a) => eap_cmd(&dir, a),
        Command::Eval(a) => eval_cmd(&dir, a),
        Command::Sweep(a) => sweep(&dir, a, seed),
        Command::ExportDot(a) => export_dot(&dir, a),
        Command::Intersect(a) => intersect(&dir, a),
        Command::FaithfulnessScatter(a) => faithfulness(&dir, a),
    }?;
    Ok(dir.path)
}

fn preflight(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Prune(a) => {
            resolve_prune_config(&a.cfg, 0)?;
        }
        Command::Sweep(a) => {
            match a.method {
                Method::Acdc => ensure!(
                    !a.taus.is_empty() && a.sparsities.is_empty(),
                    "acdc sweeps take --taus, not --sparsities"
                ),
                _ => ensure!(
                    !a.sparsities.is_empty() && a.taus.is_empty(),
                    "{:?} sweeps take --sparsities, not --taus",
                    a.method
                ),
            }
            if matches!(a.method, Method::EdgePruning) {
                resolve_prune_config(&a.prune, 0)?;
            }
            eap_options(&a.eap)?;
        }
        Command::Eap(a) => {
            eap_options(&a.flags)?;
            ensure!(a.k.is_some() || a.sparsity.is_some(), "eap needs --k or --sparsity");
        }
        Command::Compile(a) => {
            a.program.parse::<Program>()?;
        }
        _ => {}
    }
    Ok(())
}

fn model_at(path: &Path) -> Result<DisentangledTransformer> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn pairs_at(dir: &Path, split: &str) -> Result<Vec<ExamplePair>> {
    let p = dir.join(format!("{split}.jsonl"));
    let pairs = read_jsonl(&p).with_context(|| format!("reading {}", p.display()))?;
    ensure!(!pairs.is_empty(), "{} has no examples", p.display());
    Ok(pairs)
}

fn task_at(dir: &Path) -> Result<TaskData> {
    TaskData::load(dir).with_context(|| format!("loading task data from {}", dir.display()))
}

fn circuit_at(path: &Path, model: &DisentangledTransformer) -> Result<Circuit> {
    let json = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Circuit::from_json(&model.graph(), &json).with_context(|| format!("parsing circuit {}", path.display()))
}

fn generate(task: Task, g: &GenOptions, seed: u64) -> Result<TaskData> {
    let (spec, default_splits) = match task {
        Task::Ioi => {
            ensure!(g.n_names <= IOI_NAMES.len(), "at most {} names", IOI_NAMES.len());
            (TaskSpec::ioi(g.n_templates.unwrap_or(1), g.n_names), Splits::IOI)
        }
        Task::GreaterThan => (
            TaskSpec::GreaterThan {
                n_templates: g.n_templates.unwrap_or(1),
            },
            Splits::GREATER_THAN,
        ),
        Task::GenderedPronoun => (
            TaskSpec::GenderedPronoun {
                boys: BOY_NAMES.iter().map(|s| s.to_string()).collect(),
                girls: GIRL_NAMES.iter().map(|s| s.to_string()).collect(),
            },
            Splits::GENDERED_PRONOUN,
        ),
        Task::Boolean => (
            TaskSpec::Boolean,
            Splits {
                train: 150,
                validation: 150,
                test: 200,
            },
        ),
    };
    let splits = Splits {
        train: g.train.unwrap_or(default_splits.train),
        validation: g.validation.unwrap_or(default_splits.validation),
        test: g.test.unwrap_or(default_splits.test),
    };
    Ok(TaskData::generate(spec, splits, sub_seed(seed, "data"))?)
}

fn gen_data(dir: &RunDir, a: &GenDataArgs, seed: u64) -> Result<()> {
    let data = generate(a.task, &a.gen, seed)?;
    data.save(&dir.path)?;
    println!(
        "{} examples: train {}, validation {}, test {}; vocabulary {}",
        data.kind,
        data.train.len(),
        data.validation.len(),
        data.test.len(),
        data.vocab.len()
    );
    Ok(())
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Ioi => TaskKind::Ioi,
            Task::GreaterThan => TaskKind::GreaterThan,
            Task::GenderedPronoun => TaskKind::GenderedPronoun,
            Task::Boolean => TaskKind::Boolean,
        }
    }
}

fn train_toy(dir: &RunDir, a: &TrainToyArgs, seed: u64) -> Result<()> {
    let data = match &a.data {
        Some(d) => task_at(d)?,
        None => {
            let d = generate(a.task, &a.gen, seed)?;
            d.save(&dir.file("data"))?;
            d
        }
    };
    let want: TaskKind = serde_json::from_value(serde_json::to_value(a.task)?)?;
    ensure!(data.kind == want, "data is for {}, not {:?}", data.kind, a.task);
    let max_seq = data
        .train
        .iter()
        .chain(&data.validation)
        .chain(&data.test)
        .map(|p| p.clean_tokens.len())
        .max()
        .unwrap_or(1);
    ensure!(
        a.heads > 0 && a.d_model.is_multiple_of(a.heads),
        "--d-model must be a multiple of --heads"
    );
    let cfg = ModelConfig::toy(a.layers, a.heads, a.d_model, data.vocab.len(), max_seq);
    let train_cfg = TrainConfig {
        max_steps: a.max_steps,
        batch_size: a.batch_size,
        lr: a.lr,
        accuracy_bar: a.accuracy_bar,
        seed: sub_seed(seed, "train"),
        ..TrainConfig::default()
    };
    let (model, report) = train_toy_lm(&data, cfg, &train_cfg)?;
    save_model(&model, &dir.file("model.json"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(csv, "{},{l}", i + 1)?;
    }
    dir.write("train_log.csv", csv)?;
    dir.write_json("train_config.json", &train_cfg)?;
    println!(
        "trained {} steps; final validation accuracy {:.4}",
        report.steps, report.validation_accuracy
    );
    Ok(())
}

fn compile(dir: &RunDir, a: &CompileArgs, seed: u64) -> Result<()> {
    let program: Program = a.program.parse()?;
    let c = program.build();
    c.save(&dir.path)?;
    let pairs = c.dataset(a.n, 1..=c.max_len(), sub_seed(seed, "data"))?;
    edgeprune::tasks::write_jsonl(&dir.file("train.jsonl"), &pairs)?;
    dir.write_json("prune_config.json", &c.prune_config())?;
    println!(
        "{program}: {} edges, ground truth keeps {}",
        c.model.graph().n_edges(),
        c.ground_truth.n_kept()
    );
    Ok(())
}

fn parse_loss(s: &str) -> Result<PruneLoss> {
    Ok(match s {
        "kl" => PruneLoss::Kl,
        "mse" => PruneLoss::Mse,
        _ => bail!("unknown loss `{s}` (expected kl or mse)"),
    })
}

fn parse_positions(s: &str) -> Result<KlPositions> {
    Ok(match s {
        "all" => KlPositions::All,
        "answer" => KlPositions::Answer,
        _ => bail!("unknown positions `{s}` (expected all or answer)"),
    })
}

fn resolve_prune_config(o: &PruneOverrides, seed: u64) -> Result<PruneConfig> {
    let mut cfg = match &o.config {
        Some(p) => {
            let json = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<PruneConfig>(&json)
                .with_context(|| format!("invalid pruning config {}", p.display()))?
        }
        None => PruneConfig::preset(&o.preset)?,
    };
    if let Some(v) = o.steps {
        cfg.steps = v;
        cfg.sparsity_warmup_steps = cfg.sparsity_warmup_steps.min(v);
        cfg.lr_warmup_steps = cfg.lr_warmup_steps.min(v);
    }
    if let Some(v) = o.sparsity_warmup {
        cfg.sparsity_warmup_steps = v;
    }
    if let Some(v) = o.target_sparsity {
        cfg.target_edge_sparsity = v;
    }
    if let Some(v) = o.lr_log_alpha {
        cfg.lr_log_alpha = v;
    }
    if let Some(v) = o.lr_lambda {
        cfg.lr_lambda = v;
    }
    if let Some(v) = o.ablation {
        cfg.ablation_mode = v.into();
    }
    if let Some(v) = &o.loss {
        cfg.loss = parse_loss(v)?;
    }
    if let Some(v) = &o.positions {
        cfg.kl_positions = parse_positions(v)?;
    }
    cfg.seed = sub_seed(seed, "prune");
    cfg.validate()?;
    Ok(cfg)
}

fn prune_cmd(dir: &RunDir, a: &PruneArgs, seed: u64) -> Result<()> {
    let model = model_at(&a.io.model)?;
    let pairs = pairs_at(&a.io.data, &a.io.split)?;
    let mut cfg = resolve_prune_config(&a.cfg, seed)?;
    cfg.checkpoint_every = a.checkpoint_every;
    dir.write_json("prune_config.json", &cfg)?;
    let ckpt_dir = dir.file("checkpoints");
    if cfg.checkpoint_every > 0 {
        std::fs::create_dir(&ckpt_dir)?;
    }
    let out = prune_with_checkpoints(
        &model,
        &pairs,
        &cfg,
        (cfg.checkpoint_every > 0).then_some(ckpt_dir.as_path()),
    )?;
    let graph = model.graph();
    dir.write("circuit.json", out.circuit.to_json(&graph))?;
    dir.write("log.csv", out.log.to_csv())?;
    PruneCheckpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        model_config_hash: graph.model_hash().to_string(),
        config: cfg.clone(),
        step: cfg.steps,
        lagrangian: out.lagrangian,
        params: out.params.clone(),
    }
    .save(&dir.file("masks.json"))?;
    println!(
        "kept {} of {} edges (sparsity {:.4}); threshold {}",
        out.circuit.n_kept(),
        graph.n_edges(),
        out.circuit.sparsity(),
        out.threshold
    );
    Ok(())
}

fn acdc_cmd(dir: &RunDir, a: &AcdcArgs) -> Result<()> {
    let model = model_at(&a.io.model)?;
    let pairs = pairs_at(&a.io.data, &a.io.split)?;
    let out = acdc(&model, &pairs, a.tau, a.ablation.into())?;
    let graph = model.graph();
    dir.write("circuit.json", out.circuit.to_json(&graph))?;
    let mut csv = String::from("edge_id,src,dst,delta_kl,removed\n");
    for s in &out.steps {
        let e = graph.edges()[s.edge_index];
        writeln!(csv, "{},{},{},{},{}", s.edge_index, e.src, e.dst, s.delta_kl, s.removed)?;
    }
    dir.write("log.csv", csv)?;
    println!(
        "kept {} of {} edges (sparsity {:.4}); KL {:.6}",
        out.circuit.n_kept(),
        graph.n_edges(),
        out.circuit.sparsity(),
        out.kl
    );
    Ok(())
}

fn eap_options(f: &EapFlags) -> Result<EapOptions> {
    let point = match f.point.as_str() {
        "clean" => EapPoint::Clean,
        "corrupted" => EapPoint::Corrupted,
        p => bail!("unknown gradient point `{p}` (expected clean or corrupted)"),
    };
    let metric = match f.metric.as_str() {
        "kl" => EapMetric::Kl,
        "logit-diff" => EapMetric::LogitDiff,
        m => bail!("unknown metric `{m}` (expected kl or logit-diff)"),
    };
    Ok(EapOptions {
        point,
        metric,
        ..EapOptions::default()
    })
}

/// Edges kept at `sparsity`, rounded to the nearest count.
fn kept_for(sparsity: f32, n_edges: usize) -> Result<usize> {
    ensure!((0.0..=1.0).contains(&sparsity), "sparsity {sparsity} outside [0, 1]");
    Ok(((1.0 - f64::from(sparsity)) * n_edges as f64).round() as usize)
}

fn eap_cmd(dir: &RunDir, a: &EapArgs) -> Result<()> {
    let model = model_at(&a.io.model)?;
    let pairs = pairs_at(&a.io.data, &a.io.split)?;
    let graph = model.graph();
    let table = eap_scores(&model, &pairs, &eap_options(&a.flags)?)?;
    let k = match (a.k, a.sparsity) {
        (Some(k), _) => k,
        (None, Some(s)) => kept_for(s, graph.n_edges())?,
        (None, None) => unreachable!("checked before the run"),
    };
    let circuit = eap_top_k(&graph, &table, k)?;
    dir.write("scores.csv", table.to_csv(&graph))?;
    dir.write("circuit.json", circuit.to_json(&graph))?;
    println!(
        "kept {} of {} edges (sparsity {:.4}) after {} backward passes",
        circuit.n_kept(),
        graph.n_edges(),
        circuit.sparsity(),
        table.backward_passes
    );
    Ok(())
}

fn eval_cmd(dir: &RunDir, a: &EvalArgs) -> Result<()> {
    let model = model_at(&a.model)?;
    let circuit = circuit_at(&a.circuit, &model)?;
    let data = task_at(&a.task)?;
    let report = evaluate(&model, &circuit, &data, data.split(&a.split)?, a.ablation.into())?;
    dir.write_json("report.json", &report)?;
    dir.write(
        "report.csv",
        format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()),
    )?;
    println!(
        "KL {:.6}, exact match {:.4}, accuracy {:.4}, sparsity {:.4}",
        report.kl, report.exact_match, report.accuracy, report.sparsity
    );
    Ok(())
}

const FRONTIER_HEADER: &str =
    "requested,achieved_sparsity,n_edges,kl,exact_match,accuracy,logit_diff,prob_diff,kendall_tau";

fn sweep(dir: &RunDir, a: &SweepArgs, seed: u64) -> Result<()> {
    let model = model_at(&a.model)?;
    let data = task_at(&a.task)?;
    let fit = data.split(&a.fit_split)?;
    let eval_on = data.split(&a.eval_split)?;
    let graph = model.graph();
    let mut requested: Vec<f64> = match a.method {
        Method::Acdc => a.taus.clone(),
        _ => a.sparsities.iter().map(|&s| f64::from(s)).collect(),
    };
    ensure!(requested.iter().all(|v| v.is_finite()), "sweep values must be finite");
    requested.sort_by(f64::total_cmp);
    requested.dedup();

    let circuits_dir = dir.file("circuits");
    std::fs::create_dir(&circuits_dir)?;
    let eap_table = match a.method {
        Method::Eap => Some(eap_scores(&model, fit, &eap_options(&a.eap)?)?),
        _ => None,
    };
    let mut csv = format!("{FRONTIER_HEADER}\n");
    for (i, &r) in requested.iter().enumerate() {
        let circuit = match a.method {
            Method::EdgePruning => {
                let mut o = a.prune.clone();
                o.target_sparsity = Some(r as f32);
                let cfg = resolve_prune_config(&o, sub_seed(seed, &format!("sweep-{i}")))?;
                prune_with_checkpoints(&model, fit, &cfg, None)?.circuit
            }
            Method::Acdc => {
                let mode = a.prune.ablation.map_or(AblationMode::Interchange, Into::into);
                acdc(&model, fit, r, mode)?.circuit
            }
            Method::Eap => {
                let table = eap_table.as_ref().expect("scored above");
                eap_top_k(&graph, table, kept_for(r as f32, graph.n_edges())?)?
            }
        };
        std::fs::write(circuits_dir.join(format!("{i:03}.json")), circuit.to_json(&graph))?;
        let rep = evaluate(&model, &circuit, &data, eval_on, AblationMode::Interchange)?;
        // Sparsity targets are given in single precision.
        let shown = match a.method {
            Method::Acdc => r.to_string(),
            _ => (r as f32).to_string(),
        };
        writeln!(
            csv,
            "{shown},{},{},{},{},{},{},{},{}",
            rep.sparsity,
            circuit.n_kept(),
            rep.kl,
            rep.exact_match,
            rep.accuracy,
            rep.logit_diff,
            rep.prob_diff,
            rep.kendall_tau
        )?;
        println!("requested {shown}: sparsity {:.4}, KL {:.6}", rep.sparsity, rep.kl);
    }
    dir.write("frontier.csv", csv)?;
    Ok(())
}

fn export_dot(dir: &RunDir, a: &ExportDotArgs) -> Result<()> {
    let model = model_at(&a.model)?;
    let circuit = circuit_at(&a.circuit, &model)?;
    dir.write("circuit.dot", circuit_to_dot(&model.graph(), &circuit)?)?;
    println!("{} edges drawn", circuit.n_kept());
    Ok(())
}

#[derive(Serialize)]
struct IntersectionReport {
    n_a: usize,
    n_b: usize,
    n_common: usize,
    /// Common edges over the smaller circuit's size.
    overlap: f32,
    /// Common edges over the count expected for random circuits of the same sizes.
    chance_factor: f32,
}

fn intersect(dir: &RunDir, a: &IntersectArgs) -> Result<()> {
    let model = model_at(&a.model)?;
    let ca = circuit_at(&a.a, &model)?;
    let cb = circuit_at(&a.b, &model)?;
    let (common, overlap, chance_factor) = ca.intersection(&cb)?;
    let report = IntersectionReport {
        n_a: ca.n_kept(),
        n_b: cb.n_kept(),
        n_common: common.n_kept(),
        overlap,
        chance_factor,
    };
    dir.write_json("intersection.json", &report)?;
    dir.write("circuit.json", common.to_json(&model.graph()))?;
    println!(
        "{} common edges; overlap {overlap:.4}, {chance_factor:.2}x chance",
        report.n_common
    );
    Ok(())
}

fn faithfulness(dir: &RunDir, a: &FaithfulnessArgs) -> Result<()> {
    let model = model_at(&a.io.model)?;
    let circuit = circuit_at(&a.circuit, &model)?;
    let pairs = pairs_at(&a.io.data, &a.io.split)?;
    let records = edge_faithfulness(&model, &circuit, &pairs, &circuit.kept_edge_indices())?;
    dir.write("faithfulness.csv", faithfulness_csv(&records))?;
    let m: Vec<f64> = records.iter().map(|r| r.m_e).collect();
    let c: Vec<f64> = records.iter().map(|r| r.c_e).collect();
    println!(
        "{} edges; Spearman(m_e, c_e) = {:.4}",
        records.len(),
        edgeprune::metrics::spearman(&m, &c)
    );
    Ok(())
}
