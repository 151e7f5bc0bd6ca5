//! Command-line entry point: graph export, training, evaluation, the
//! ablation harness, synthetic corpus generation, and gradient
//! checking.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! failure. Setting `ESIHGNN_DETERMINISTIC=1` forces 64-bit
//! deterministic arithmetic everywhere.

use clap::{Args, Parser, Subcommand};
use esihgnn::checkpoint;
use esihgnn::corpus::{self, Corpus, Split, SynthSpec};
use esihgnn::edge_features::load_external;
use esihgnn::error::{Error, Result};
use esihgnn::grad_check::check_model_gradients;
use esihgnn::graph::{build_graph, export_graph, ExportFormat, RelationSet, RelationType};
use esihgnn::metrics::MetricKind;
use esihgnn::model::Model;
use esihgnn::tensor::Real;
use esihgnn::train::{
    ablate, evaluate, render_ablation_table, standard_grid, train, RunConfigFile,
};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "esihgnn", version, about = "Event-state interaction graph networks for conversational emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the interaction graph of a conversation and export it.
    BuildGraph(BuildGraphArgs),
    /// Train a model from a run configuration file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run the standard ablation grid.
    Ablate(TrainArgs),
    /// Generate a synthetic corpus with context-dependent labels.
    GenSynthetic(GenArgs),
    /// Verify model gradients against central finite differences.
    CheckGrad(CheckGradArgs),
}

#[derive(Args)]
struct BuildGraphArgs {
    /// Corpus file to read the conversation from.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Dialogue id within the corpus (default: first).
    #[arg(long)]
    dialogue: Option<String>,
    /// Comma-separated speaker sequence, e.g. `A,B,A`, as an inline
    /// alternative to --corpus.
    #[arg(long)]
    speakers: Option<String>,
    #[arg(long, default_value_t = 1)]
    omega: usize,
    #[arg(long, default_value = "json")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    omega: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// default | trainable | binary01
    #[arg(long)]
    edge_mode: Option<String>,
    #[arg(long)]
    no_intra_esi: bool,
    /// Comma-separated active relation subset, e.g. `xWant,oWant`.
    #[arg(long)]
    relations: Option<String>,
    /// weighted_f1 | micro_f1
    #[arg(long)]
    metric: Option<String>,
    /// Comma-separated label indices excluded from micro-F1.
    #[arg(long)]
    exclude_labels: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 20)]
    dialogues: usize,
    #[arg(long, default_value_t = 8)]
    max_turns: usize,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    omega: usize,
    /// Coordinates probed per parameter (0 = all).
    #[arg(long, default_value_t = 0)]
    sample: usize,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version output is a success path
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn deterministic() -> bool {
    std::env::var("ESIHGNN_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGraph(args) => build_graph_cmd(args),
        Command::Train(args) => {
            if deterministic() {
                train_cmd::<f64>(args)
            } else {
                train_cmd::<f32>(args)
            }
        }
        Command::Eval(args) => {
            if deterministic() {
                eval_cmd::<f64>(args)
            } else {
                eval_cmd::<f32>(args)
            }
        }
        Command::Ablate(args) => {
            if deterministic() {
                ablate_cmd::<f64>(args)
            } else {
                ablate_cmd::<f32>(args)
            }
        }
        Command::GenSynthetic(args) => {
            let spec = SynthSpec {
                dialogues: args.dialogues,
                max_turns: args.max_turns,
                speakers: args.speakers,
                classes: args.classes,
                feature_dim: args.feature_dim,
                seed: args.seed,
            };
            corpus::gen_synthetic_to_file(&spec, &args.out)?;
            println!("wrote synthetic corpus to {}", args.out.display());
            Ok(())
        }
        Command::CheckGrad(args) => check_grad_cmd(args),
    }
}

fn build_graph_cmd(args: BuildGraphArgs) -> Result<()> {
    let conv = match (&args.corpus, &args.speakers) {
        (Some(path), _) => {
            let corpus = corpus::ingest(path)?;
            let all: Vec<_> = corpus.all().cloned().collect();
            match &args.dialogue {
                Some(id) => all
                    .into_iter()
                    .find(|c| &c.dialogue_id == id)
                    .ok_or_else(|| Error::Usage(format!("dialogue '{id}' not found")))?,
                None => all.into_iter().next().ok_or_else(|| Error::Usage("empty corpus".into()))?,
            }
        }
        (None, Some(spec)) => {
            let speakers: Vec<&str> = spec.split(',').map(str::trim).collect();
            let turns = speakers
                .iter()
                .enumerate()
                .map(|(i, s)| esihgnn::graph::Utterance {
                    turn_index: i,
                    speaker_id: s.to_string(),
                    text: None,
                    label: None,
                    feature: vec![],
                })
                .collect();
            esihgnn::graph::Conversation::new("inline".into(), turns)?
        }
        (None, None) => {
            return Err(Error::Usage("build-graph needs --corpus or --speakers".into()))
        }
    };
    let graph = build_graph(&conv, args.omega)?;
    let text = export_graph(&graph, ExportFormat::parse(&args.format)?)?;
    match args.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_run_config(args: &TrainArgs) -> Result<(RunConfigFile, Corpus)> {
    let raw = fs::read_to_string(&args.config)
        .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut cfg: RunConfigFile = serde_json::from_str(&raw)
        .map_err(|e| Error::Usage(format!("bad config {}: {e}", args.config.display())))?;

    if let Some(v) = args.omega {
        cfg.train.omega = v;
    }
    if let Some(v) = args.layers {
        cfg.train.layers = v;
    }
    if let Some(v) = args.hidden {
        cfg.train.hidden = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = &args.edge_mode {
        cfg.train.edge_mode = v.clone();
    }
    if args.no_intra_esi {
        cfg.train.intra_esi = false;
    }
    if let Some(list) = &args.relations {
        let mut keep = RelationSet::empty();
        for name in list.split(',') {
            let r = RelationType::parse(name.trim())
                .ok_or_else(|| Error::Usage(format!("unknown relation '{name}'")))?;
            keep = keep.with(r);
        }
        cfg.train.ablate_relations = RelationType::ALL
            .iter()
            .filter(|r| !keep.contains(**r))
            .map(|r| r.name().to_string())
            .collect();
    }
    if let Some(m) = &args.metric {
        cfg.train.metric.kind = MetricKind::parse(m)?;
    }
    if let Some(list) = &args.exclude_labels {
        cfg.train.metric.excluded_labels = list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Usage(format!("bad label index '{s}'")))
            })
            .collect::<Result<_>>()?;
    }

    let corpus_path = resolve(&args.config, &cfg.corpus);
    let corpus = corpus::ingest(&corpus_path)?;
    if cfg.train.metric.excluded_labels.is_empty() {
        cfg.train.metric.excluded_labels =
            corpus.header.excluded_labels.iter().copied().collect();
    }
    Ok((cfg, corpus))
}

fn resolve(config_path: &Path, rel: &str) -> PathBuf {
    let p = PathBuf::from(rel);
    if p.is_absolute() {
        p
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn load_knowledge(cfg: &RunConfigFile, config_path: &Path) -> Result<Option<esihgnn::edge_features::ExternalVectors>> {
    match &cfg.knowledge_vectors {
        Some(rel) => {
            let path = resolve(config_path, rel);
            let file = fs::File::open(&path)
                .map_err(|e| Error::Usage(format!("cannot open {}: {e}", path.display())))?;
            Ok(Some(load_external(BufReader::new(file))?))
        }
        None => {
            eprintln!("note: no knowledge vectors configured; trainable edge fallback engaged");
            Ok(None)
        }
    }
}

fn train_cmd<T: Real>(args: TrainArgs) -> Result<()> {
    let (cfg, corpus) = load_run_config(&args)?;
    let external = load_knowledge(&cfg, &args.config)?;
    let (model, report) = train::<T>(&cfg.train, &corpus, external)?;
    if let Some(out) = &cfg.checkpoint_out {
        let path = resolve(&args.config, out);
        checkpoint::save(&model.store, &path)?;
        eprintln!("checkpoint written to {}", path.display());
    }
    let json = serde_json::to_string_pretty(&report)?;
    match args.out {
        Some(p) => fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn eval_cmd<T: Real>(args: EvalArgs) -> Result<()> {
    let train_args = TrainArgs {
        config: args.config.clone(),
        omega: None,
        layers: None,
        hidden: None,
        seed: None,
        edge_mode: None,
        no_intra_esi: false,
        relations: None,
        metric: None,
        exclude_labels: None,
        out: None,
    };
    let (cfg, corpus) = load_run_config(&train_args)?;
    let external = load_knowledge(&cfg, &args.config)?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(Error::Usage(format!("unknown split '{other}'"))),
    };
    let model_config = cfg.train.model_config(&corpus)?;
    let mut model: Model<T> = Model::new(model_config, cfg.train.seed, external);
    checkpoint::load(&mut model.store, &args.checkpoint)?;
    let score = evaluate(&model, corpus.split(split), &cfg.train.metric)?;
    println!("{{\"split\": \"{}\", \"metric\": {score}}}", args.split);
    Ok(())
}

fn ablate_cmd<T: Real>(args: TrainArgs) -> Result<()> {
    let (cfg, corpus) = load_run_config(&args)?;
    let grid = standard_grid(&cfg.train);
    let rows = ablate::<T>(&grid, &corpus)?;
    print!("{}", render_ablation_table(&rows));
    if let Some(p) = &args.out {
        fs::write(p, serde_json::to_string_pretty(&rows)?)?;
        eprintln!("ablation table written to {}", p.display());
    }
    Ok(())
}

fn check_grad_cmd(args: CheckGradArgs) -> Result<()> {
    let report = check_model_gradients(args.seed, args.hidden, args.layers, args.omega, args.sample)?;
    for (name, err) in &report.per_param {
        println!("{name:<28} {err:.3e}");
    }
    println!("max relative error: {:.3e}", report.max_rel_err);
    if report.max_rel_err < 1e-4 {
        println!("gradient check passed");
        Ok(())
    } else {
        Err(Error::NonFinite { op: "gradient check exceeded 1e-4" })
    }
}
