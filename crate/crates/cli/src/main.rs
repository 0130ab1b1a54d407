use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdmt_core::data::{ClassOrder, TaskKind};
use mdmt_core::experiment::{self, DataManifest, DatasetSpec, ExperimentConfig, SyntheticSpec};
use mdmt_core::trainer::LossMode;
use mdmt_core::Error;

#[derive(Parser, Debug)]
#[command(name = "mdmt", version, about = "Multi-domain multi-task rehearsal experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a task sequence described by a config file.
    Train(TrainArgs),
    /// Print A_T, F_T, LTR (and LCA) for an accuracy matrix file.
    EvalMatrix(EvalArgs),
    /// Write a task sequence to CSV files with a manifest.
    GenData(GenArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
    /// Disable episodic distillation.
    #[arg(long)]
    no_ed: bool,
    /// Number of updates tracked for LCA.
    #[arg(long)]
    beta: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    matrix: PathBuf,
    /// LCA horizon; defaults to 10 or the recorded curve length if shorter.
    #[arg(long)]
    beta: Option<usize>,
    /// Curves file (as written by `train`) or a plain T x (beta+1) table.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Print JSON instead of key-value text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Regenerate from an existing data manifest; other options are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind, default_value = "synthetic")]
    kind: TaskKind,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    train_per_class: usize,
    #[arg(long, default_value_t = 10)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    #[arg(long)]
    classes_per_task: Option<usize>,
    /// `random` or `sequential`.
    #[arg(long, value_parser = parse_order, default_value = "random")]
    class_order: ClassOrder,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_loss_mode(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<TaskKind, String> {
    match s {
        "permuted" => Ok(TaskKind::Permuted),
        "split" => Ok(TaskKind::Split),
        "synthetic" => Ok(TaskKind::Synthetic),
        _ => Err(format!("unknown kind {s:?} (expected permuted, split or synthetic)")),
    }
}

fn parse_order(s: &str) -> Result<ClassOrder, String> {
    match s {
        "random" => Ok(ClassOrder::Random),
        "sequential" => Ok(ClassOrder::Sequential),
        _ => Err(format!("unknown class order {s:?} (expected random or sequential)")),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NumericDomain(_) | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.dataset.seed = seed;
    }
    if let Some(mode) = args.loss_mode {
        cfg.train.loss_mode = mode;
    }
    if args.no_ed {
        cfg.train.use_ed = false;
    }
    if let Some(beta) = args.beta {
        cfg.train.lca_beta = beta;
    }
    let summary = experiment::run(&cfg)?;
    print!("{}", summary.report.to_text());
    println!("outputs: {}", summary.out_dir.display());
    Ok(())
}

fn cmd_eval_matrix(args: EvalArgs) -> Result<(), Error> {
    let report = experiment::eval_matrix(&args.matrix, args.curve.as_deref(), args.beta)?;
    if args.json {
        println!("{:#}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_gen_data(args: GenArgs) -> Result<(), Error> {
    let spec = match &args.manifest {
        Some(path) => DataManifest::load(path)?.dataset,
        None => DatasetSpec {
            kind: args.kind,
            tasks: args.tasks,
            classes_per_task: args.classes_per_task,
            class_order: args.class_order,
            seed: args.seed,
            synthetic: Some(SyntheticSpec {
                classes: args.classes,
                dim: args.dim,
                train_per_class: args.train_per_class,
                test_per_class: args.test_per_class,
                spread: args.spread,
            }),
            idx: None,
        },
    };
    let manifest = experiment::gen_data(&spec, &args.out)?;
    let tasks = manifest.permutations.len().max(manifest.class_sets.len()).max(spec.tasks.unwrap_or(0));
    println!("wrote {tasks} tasks to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::EvalMatrix(a) => cmd_eval_matrix(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
