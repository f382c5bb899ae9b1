use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mrt_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
use mrt_core::config::RunConfig;
use mrt_core::control::{build_control_plan, control_dataset, eval_counterfact, run_control_training};
use mrt_core::data::{dump_jsonl, Split, TaskMix};
use mrt_core::diagnostics::{self, loss_landscape};
use mrt_core::parallel::{threads_from_env, with_threads};
use mrt_core::pretrain::pretrain_base_with;
use mrt_core::train::{evaluate, train_editors};
use mrt_core::{EditPlan, EditorSet, MrtError, ToyModel};

const CHECKPOINT_FILE: &str = "checkpoint.mrt";
const FAILED_MARKER: &str = "FAILED";

#[derive(Parser, Debug)]
#[command(name = "mrt", version, about = "Train and probe low-rank representation editors on a frozen toy model")]
struct Cli {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory receiving every artifact of the run.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,

    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mix {
    /// Classification taught on half the classes.
    Headroom,
    /// Every task on every class.
    Competent,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the base model and save it as a checkpoint with no editors.
    PretrainBase {
        #[arg(long, value_enum)]
        mix: Option<Mix>,
    },
    /// Train editors on top of a frozen base.
    Train {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Exact-match accuracy of a trained checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a counterfactual control editor set.
    ControlTrain {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Counterfact rate and disruption of a control checkpoint.
    ControlEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    SweepRank {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    SweepDepth {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    SweepLength {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    SweepSegment {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Loss surface around a trained checkpoint along two random directions.
    Landscape {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        span: Option<f64>,
        /// Also write the grid as a whitespace-separated matrix.
        #[arg(long)]
        emit_gnuplot: bool,
    },
    /// Write a dataset split as JSON lines.
    DumpData {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.clone();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if out.is_dir() {
                let _ = fs::write(out.join(FAILED_MARKER), format!("{err:#}\n"));
            }
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<MrtError>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    apply_overrides(&mut cfg, &cli.command);
    cfg.validate()?;

    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let stale = cli.out.join(FAILED_MARKER);
    if stale.exists() {
        fs::remove_file(&stale)?;
    }
    fs::write(cli.out.join("config.json"), cfg.to_json()?)?;

    let threads = threads_from_env().or(cfg.threads);
    with_threads(threads, || dispatch(&cfg, &cli.command, &cli.out))
}

/// Folds subcommand flags into the config so the written config.json is exact.
fn apply_overrides(cfg: &mut RunConfig, cmd: &Command) {
    match cmd {
        Command::PretrainBase { mix: Some(mix) } => {
            cfg.pretrain.mix = match mix {
                Mix::Headroom => TaskMix::default(),
                Mix::Competent => TaskMix::competent(),
            }
        }
        Command::Train { base: Some(p) }
        | Command::ControlTrain { base: Some(p) }
        | Command::SweepRank { base: Some(p) }
        | Command::SweepDepth { base: Some(p) }
        | Command::SweepLength { base: Some(p) }
        | Command::SweepSegment { base: Some(p) } => cfg.paths.base_checkpoint = Some(p.clone()),
        Command::Eval { checkpoint: Some(p) } | Command::ControlEval { checkpoint: Some(p) } => {
            cfg.paths.checkpoint = Some(p.clone())
        }
        Command::Landscape {
            checkpoint,
            grid,
            span,
            ..
        } => {
            if let Some(p) = checkpoint {
                cfg.paths.checkpoint = Some(p.clone());
            }
            if let Some(g) = grid {
                cfg.landscape.grid = *g;
            }
            if let Some(s) = span {
                cfg.landscape.span = *s;
            }
        }
        _ => {}
    }
}

fn dispatch(cfg: &RunConfig, cmd: &Command, out: &Path) -> Result<()> {
    match cmd {
        Command::PretrainBase { .. } => pretrain_base(cfg, out),
        Command::Train { .. } => train(cfg, out),
        Command::Eval { .. } => eval(cfg, out),
        Command::ControlTrain { .. } => control_train(cfg, out),
        Command::ControlEval { .. } => control_eval(cfg, out),
        Command::SweepRank { .. } => {
            let rows = diagnostics::rank_sweep(&base_model(cfg, out)?, &cfg.sweep)?;
            write(out, "rank_sweep.csv", &diagnostics::rank_csv(&rows))
        }
        Command::SweepDepth { .. } => {
            let rows = diagnostics::depth_sweep(&base_model(cfg, out)?, &cfg.sweep)?;
            write(out, "depth_sweep.csv", &diagnostics::depth_csv(&rows))
        }
        Command::SweepLength { .. } => {
            let rows = diagnostics::length_sweep(&base_model(cfg, out)?, &cfg.sweep)?;
            write(out, "length_sweep.csv", &diagnostics::length_csv(&rows))
        }
        Command::SweepSegment { .. } => {
            let rows = diagnostics::segment_ablation(&base_model(cfg, out)?, &cfg.sweep)?;
            write(out, "segment_ablation.csv", &diagnostics::segment_csv(&rows))
        }
        Command::Landscape { emit_gnuplot, .. } => landscape(cfg, out, *emit_gnuplot),
        Command::DumpData { split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let samples = cfg.data.split(split)?;
            dump_jsonl(&samples, &out.join("data.jsonl"))?;
            eprintln!("wrote {} samples", samples.len());
            Ok(())
        }
    }
}

fn write(out: &Path, name: &str, body: &str) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_json(out: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    write(out, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_input(path: &Path, what: &str) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading {what} checkpoint {}", path.display()))
}

/// Saves into `out`, refusing to overwrite any checkpoint the run read.
fn save_output(cfg: &RunConfig, mut ckpt: Checkpoint, out: &Path) -> Result<PathBuf> {
    let path = out.join(CHECKPOINT_FILE);
    for input in [&cfg.paths.base_checkpoint, &cfg.paths.checkpoint].into_iter().flatten() {
        if same_file(input, &path) {
            bail!(MrtError::Config(format!(
                "output {} would overwrite input checkpoint; choose another --out",
                path.display()
            )));
        }
    }
    ckpt.config_hash = cfg.hash();
    save_checkpoint(&ckpt, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(path)
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn base_model(cfg: &RunConfig, out: &Path) -> Result<ToyModel> {
    match &cfg.paths.base_checkpoint {
        Some(p) => Ok(load_input(p, "base")?.model_with(cfg.model.clone())?),
        None => {
            eprintln!("no base checkpoint given; pretraining one in-process");
            let (model, metrics) = pretrain_base_with(cfg.model.clone(), cfg.seed, &cfg.pretrain, cfg.train.execution)?;
            write(out, "pretrain_metrics.csv", &metrics.to_csv())?;
            Ok(model)
        }
    }
}

fn trained_checkpoint(cfg: &RunConfig) -> Result<(Checkpoint, ToyModel)> {
    let path = cfg
        .paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| MrtError::Config("no checkpoint given; pass --checkpoint or set paths.checkpoint".into()))?;
    let ckpt = load_input(path, "trained")?;
    if ckpt.editors.is_empty() {
        bail!(MrtError::Precondition(format!(
            "{} holds no trained editors; run train or control-train first",
            path.display()
        )));
    }
    let model = ckpt.model_with(cfg.model.clone())?;
    Ok((ckpt, model))
}

fn pretrain_base(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (model, metrics) = pretrain_base_with(cfg.model.clone(), cfg.seed, &cfg.pretrain, cfg.train.execution)?;
    write(out, "metrics.csv", &metrics.to_csv())?;
    let test = cfg.data.split(Split::Test)?;
    let acc = evaluate(&model, &EditorSet::new(), &EditPlan::none(), &test, cfg.train.execution)?;
    let mut ckpt = Checkpoint::new(&model, None, &EditorSet::new());
    ckpt.rng = RngState {
        seed: cfg.seed,
        step: metrics.steps.len() as u64,
    };
    save_output(cfg, ckpt, out)?;
    write_json(
        out,
        "summary.json",
        &json!({
            "base_accuracy": acc,
            "param_count": model.param_count(),
            "steps": metrics.steps.len(),
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
        }),
    )
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = base_model(cfg, out)?;
    let train = cfg.data.split(Split::Train)?;
    let test = cfg.data.split(Split::Test)?;
    let base_acc = evaluate(&model, &EditorSet::new(), &EditPlan::none(), &test, cfg.train.execution)?;
    let (editors, metrics) = train_editors(&model, &cfg.plan, &train, &cfg.train, Some(&test))?;
    write(out, "metrics.csv", &metrics.to_csv())?;
    let mut ckpt = Checkpoint::new(&model, Some(&cfg.plan), &editors);
    ckpt.rng = RngState {
        seed: cfg.train.seed,
        step: metrics.steps.len() as u64,
    };
    save_output(cfg, ckpt, out)?;
    let acc = metrics.final_accuracy().ok_or_else(|| anyhow!("training produced no evaluation"))?;
    eprintln!("base accuracy {base_acc:.3} -> edited {acc:.3}");
    write_json(
        out,
        "summary.json",
        &json!({
            "final_accuracy": acc,
            "base_accuracy": base_acc,
            "trainable_fraction": metrics.trainable_fraction,
            "trainable_params": metrics.trainable_params,
            "updated_tensors": metrics.updated_tensors,
            "wall_clock_secs": metrics.wall_clock_secs,
            "seed": cfg.train.seed,
            "config_hash": cfg.hash(),
        }),
    )
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (ckpt, model) = trained_checkpoint(cfg)?;
    let plan = ckpt.plan.clone().unwrap_or_else(|| cfg.plan.clone());
    let test = cfg.data.split(Split::Test)?;
    let acc = evaluate(&model, &ckpt.editors, &plan, &test, cfg.train.execution)?;
    let base_acc = evaluate(&model, &EditorSet::new(), &EditPlan::none(), &test, cfg.train.execution)?;
    eprintln!("accuracy {acc:.3} (frozen base {base_acc:.3})");
    write_json(
        out,
        "summary.json",
        &json!({
            "accuracy": acc,
            "base_accuracy": base_acc,
            "samples": test.len(),
            "checkpoint_config_hash": ckpt.config_hash,
            "config_hash": cfg.hash(),
        }),
    )
}

fn control_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = base_model(cfg, out)?;
    let (editors, report) = run_control_training(&model, &cfg.scenario, &cfg.control)?;
    let plan = build_control_plan(&model.config, &cfg.scenario, &cfg.control);
    save_output(cfg, Checkpoint::new(&model, Some(&plan), &editors), out)?;
    write(out, "control_train.json", &report.to_json()?)
}

fn control_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (ckpt, model) = trained_checkpoint(cfg)?;
    let test = control_dataset(&cfg.scenario, &cfg.control, Split::Test)?;
    let report = eval_counterfact(&model, &ckpt.editors, &cfg.scenario, &cfg.control, &test)?;
    eprintln!(
        "counterfact rate {:.3}, disruption {:.3}",
        report.counterfact_rate_on_e, report.other_class_disruption
    );
    write(out, "control.json", &report.to_json()?)?;
    write(out, "per_class.csv", &report.per_class_csv())
}

fn landscape(cfg: &RunConfig, out: &Path, emit_gnuplot: bool) -> Result<()> {
    let (ckpt, model) = trained_checkpoint(cfg)?;
    let plan = ckpt
        .plan
        .clone()
        .ok_or_else(|| MrtError::Precondition("checkpoint carries editors but no edit plan".into()))?;
    let all = cfg.data.split(Split::Train)?;
    // strided so every class is represented
    let stride = (all.len() / cfg.landscape_samples).max(1);
    let data: Vec<_> = all.into_iter().step_by(stride).take(cfg.landscape_samples).collect();
    let grid = loss_landscape(&model, &ckpt.editors, &plan, &data, &cfg.landscape)?;
    if !grid.all_finite() {
        eprintln!("warning: some landscape cells are not finite");
    }
    eprintln!("center loss {:.6}", grid.center_loss);
    write(out, "landscape.csv", &grid.to_csv())?;
    if emit_gnuplot {
        write(out, "landscape.dat", &grid.to_matrix())?;
    }
    Ok(())
}
