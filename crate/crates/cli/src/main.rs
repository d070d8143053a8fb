//! `mvg`: batch command line over the multi-view graph QA pipeline.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvg_core::gradsuite::run_gradient_suite;
use mvg_core::{
    evaluate_dataset, parse_dataset, train, DecodeMode, EvalReport, GraphConfig, HybridDocument, Model, ModelConfig,
    Overrides, PredictOptions, Prediction, ScaleConvention, TrainConfig,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mvg", version, about = "Multi-view graph question answering over tables and text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and print summary counts.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the node table and view edge lists of every question.
    Graph {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        views: ViewFlags,
    },
    /// Train a model and write a checkpoint plus a per-epoch metrics log.
    Train(TrainArgs),
    /// Answer every question of a dataset with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// 1 decodes greedily.
        #[arg(long, default_value = "3", value_parser = ["1", "3"])]
        beam: String,
        #[command(flatten)]
        gold: GoldFlags,
    },
    /// Score predictions against the gold answers of a dataset.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plain-text table; always printed to stdout as well.
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        gold: GoldFlags,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Copy)]
struct ViewFlags {
    #[arg(long)]
    no_tabular_view: bool,
    #[arg(long)]
    no_relation_view: bool,
    #[arg(long)]
    no_numerical_view: bool,
    #[arg(long)]
    no_row_col_nodes: bool,
}

impl ViewFlags {
    fn apply(self, g: &mut GraphConfig) {
        g.tabular_view &= !self.no_tabular_view;
        g.relation_view &= !self.no_relation_view;
        g.numerical_view &= !self.no_numerical_view;
        g.row_col_nodes &= !self.no_row_col_nodes;
    }
}

#[derive(Args, Clone, Copy)]
struct GoldFlags {
    /// Route every question with its annotated operator.
    #[arg(long)]
    gold_operator: bool,
    /// Use the annotated scale.
    #[arg(long)]
    gold_scale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-scale optimiser settings.
    Default,
    /// Settings tuned to memorise a few dozen questions.
    SmallData,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluation set; defaults to the training set.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Where the checkpoint is written.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics log; defaults to `<checkpoint>.metrics.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Stop once dev EM reaches this value.
    #[arg(long)]
    stop_at_em: Option<f64>,
    #[arg(long)]
    no_tree_loss: bool,
    #[arg(long)]
    no_tag_loss: bool,
    #[arg(long)]
    no_mv_attention: bool,
    #[command(flatten)]
    views: ViewFlags,
}

impl TrainArgs {
    fn configs(&self) -> (ModelConfig, TrainConfig) {
        let mut model = ModelConfig::default();
        self.views.apply(&mut model.graph);
        model.encoder.multi_view_attention = !self.no_mv_attention;
        if let Some(d) = self.dim {
            model.encoder.dim = d;
        }
        let mut tc = match self.preset {
            Preset::Default => TrainConfig::default(),
            Preset::SmallData => TrainConfig::small_data(),
        };
        tc.seed = self.seed;
        macro_rules! set {
            ($($field:ident <- $flag:ident),*) => {
                $(if let Some(v) = self.$flag { tc.$field = v; })*
            };
        }
        set!(epochs <- epochs, batch_size <- batch_size, learning_rate <- lr, weight_decay <- weight_decay,
             warmup_fraction <- warmup, dropout <- dropout, eval_every <- eval_every);
        if self.stop_at_em.is_some() {
            tc.stop_at_em = self.stop_at_em;
        }
        tc.toggles.tree &= !self.no_tree_loss;
        tc.toggles.tag &= !self.no_tag_loss;
        (model, tc)
    }
}

enum Failure {
    Input(String),
    Internal(String),
}

impl From<mvg_core::Error> for Failure {
    fn from(e: mvg_core::Error) -> Self {
        let message = e.to_string().replace('\n', " ");
        if e.is_input_error() {
            Failure::Input(message)
        } else {
            Failure::Internal(message)
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn input_file(path: &Path) -> Outcome<File> {
    File::open(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))
}

fn check_output(path: &Path) -> Outcome {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(Failure::Input(format!("output directory {} does not exist", dir.display())))
        }
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Outcome<Vec<HybridDocument>> {
    let raw = std::fs::read(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(parse_dataset(&raw)?)
}

fn write_failed(path: &Path, e: std::io::Error) -> Failure {
    Failure::Input(format!("cannot write {}: {e}", path.display()))
}

/// Writes `text` to `out`, or to stdout when no path is given.
fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| write_failed(p, e)),
        None => to_stdout(&format!("{text}\n")),
    }
}

/// A closed pipe downstream (`mvg graph ... | head`) is not a failure.
fn to_stdout(text: &str) -> Outcome {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Input(format!("cannot write stdout: {e}"))),
        _ => Ok(()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Outcome<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Internal(format!("serialisation: {e}")))
}

fn ingest(dataset: &Path, out: Option<&Path>) -> Outcome {
    if let Some(o) = out {
        check_output(o)?;
    }
    let docs = load_dataset(dataset)?;
    let mut by_type: BTreeMap<String, usize> = BTreeMap::new();
    let mut nodes = 0;
    let mut questions = 0;
    for d in &docs {
        for q in &d.questions {
            questions += 1;
            *by_type.entry(format!("{:?}", q.answer_type).to_lowercase()).or_default() += 1;
            nodes += mvg_core::build_multi_view_graph(d, q, &GraphConfig::default())?.node_count();
        }
    }
    let summary = json!({
        "documents": docs.len(),
        "questions": questions,
        "paragraphs": docs.iter().map(|d| d.paragraphs.len()).sum::<usize>(),
        "table_cells": docs.iter().map(|d| d.table.n_rows() * d.table.n_cols()).sum::<usize>(),
        "graph_nodes": nodes,
        "answer_types": by_type,
    });
    emit(out, &to_json(&summary)?)
}

fn graph(dataset: &Path, out: Option<&Path>, views: ViewFlags) -> Outcome {
    if let Some(o) = out {
        check_output(o)?;
    }
    let docs = load_dataset(dataset)?;
    let mut config = GraphConfig::default();
    views.apply(&mut config);
    let mut graphs = Vec::new();
    for d in &docs {
        for q in &d.questions {
            graphs.push(mvg_core::build_multi_view_graph(d, q, &config)?);
        }
    }
    let exports: Vec<_> = docs
        .iter()
        .flat_map(|d| d.questions.iter().map(move |q| (d, q)))
        .zip(&graphs)
        .map(|((d, q), g)| g.export(&d.id, &q.id))
        .collect();
    emit(out, &to_json(&exports)?)
}

fn train_command(args: &TrainArgs) -> Outcome {
    let log_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", args.checkpoint.display())));
    check_output(&args.checkpoint)?;
    check_output(&log_path)?;
    let docs = load_dataset(&args.dataset)?;
    let dev = args.dev.as_deref().map(load_dataset).transpose()?;
    let (model_config, config) = args.configs();
    let mut log = create(&log_path)?;
    let outcome = train(&docs, dev.as_deref(), model_config, &config, Some(&mut log))?;
    log.flush().map_err(|e| write_failed(&log_path, e))?;
    let mut w = create(&args.checkpoint)?;
    outcome.model.save(&mut w)?;
    w.flush().map_err(|e| write_failed(&args.checkpoint, e))?;
    let last = outcome.history.last();
    eprintln!(
        "{}",
        json!({
            "epochs": outcome.history.len(),
            "loss": last.map(|m| m.loss),
            "dev_em": outcome.history.iter().rev().find_map(|m| m.dev_em),
            "checkpoint": args.checkpoint,
            "metrics": log_path,
        })
    );
    Ok(())
}

fn predict(checkpoint: &Path, dataset: &Path, out: Option<&Path>, beam: &str, gold: GoldFlags) -> Outcome {
    if let Some(o) = out {
        check_output(o)?;
    }
    let model = Model::load(BufReader::new(input_file(checkpoint)?))?;
    let docs = load_dataset(dataset)?;
    let mode = match beam {
        "1" => DecodeMode::Greedy,
        _ => DecodeMode::Beam(3),
    };
    let opts = PredictOptions {
        mode,
        gold_operator: gold.gold_operator,
        gold_scale: gold.gold_scale,
    };
    let preds = model.predict_dataset(&docs, &opts)?;
    emit(out, &to_json(&preds)?)
}

fn eval(predictions: &Path, dataset: &Path, out: Option<&Path>, table: Option<&Path>, gold: GoldFlags) -> Outcome {
    for o in [out, table].into_iter().flatten() {
        check_output(o)?;
    }
    let raw = std::fs::read(predictions)
        .map_err(|e| Failure::Input(format!("cannot read {}: {e}", predictions.display())))?;
    let preds: Vec<Prediction> = serde_json::from_slice(&raw)
        .map_err(|e| Failure::Input(format!("bad predictions file {}: {e}", predictions.display())))?;
    let docs = load_dataset(dataset)?;
    let overrides = Overrides {
        gold_operator: gold.gold_operator,
        gold_scale: gold.gold_scale,
    };
    let report: EvalReport = evaluate_dataset(&preds, &docs, overrides, &ScaleConvention::default())?;
    let text = report.render_table();
    if let Some(p) = out {
        emit(Some(p), &to_json(&report)?)?;
    }
    if let Some(p) = table {
        emit(Some(p), &text)?;
    }
    to_stdout(&text)
}

fn gradcheck(seed: u64, out: Option<&Path>) -> Outcome {
    if let Some(o) = out {
        check_output(o)?;
    }
    let entries = run_gradient_suite(seed)?;
    for e in &entries {
        to_stdout(&format!(
            "{:<22} {} max relative error {:.3e} (tolerance {:.0e}, {} coordinates)\n",
            e.name,
            if e.passed() { "PASS" } else { "FAIL" },
            e.max_rel_error,
            e.tolerance,
            e.coordinates
        ))?;
    }
    if let Some(p) = out {
        emit(Some(p), &to_json(&entries)?)?;
    }
    match entries.iter().filter(|e| !e.passed()).map(|e| e.name).collect::<Vec<_>>() {
        failed if failed.is_empty() => Ok(()),
        failed => Err(Failure::Internal(format!("gradient check failed for {}", failed.join(",")))),
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Ingest { dataset, out } => ingest(&dataset, out.as_deref()),
        Command::Graph { dataset, out, views } => graph(&dataset, out.as_deref(), views),
        Command::Train(args) => train_command(&args),
        Command::Predict {
            checkpoint,
            dataset,
            out,
            beam,
            gold,
        } => predict(&checkpoint, &dataset, out.as_deref(), &beam, gold),
        Command::Eval {
            predictions,
            dataset,
            out,
            table,
            gold,
        } => eval(&predictions, &dataset, out.as_deref(), table.as_deref(), gold),
        Command::Gradcheck { seed, out } => gradcheck(seed, out.as_deref()),
    }
}

fn report(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = to_stdout(&e.to_string());
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report("usage", line, 1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => report("input", &m, 1),
        Err(Failure::Internal(m)) => report("internal", &m, 2),
    }
}
