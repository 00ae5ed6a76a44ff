use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use peftlab_core::accounting::BudgetReport;
use peftlab_core::harness::{
    emit_csv, emit_curves, evaluate_checkpoint, parse_experiment, parse_grid, prebuilt_grid, run_experiment_with_model,
    run_grid, ExperimentFile, GridSpec, MethodSection, ModelSection, RunRecord, Split, PREBUILT_GRIDS,
};
use peftlab_core::model::checkpoint::save_checkpoint;
use peftlab_core::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "peftlab", version, about = "Parameter-efficient fine-tuning experiments on a desk-scale transformer")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment described by a TOML file.
    Train(TrainArgs),
    /// Run a grid of experiments and write one CSV row per cell and seed.
    Grid(GridArgs),
    /// Print the tunable-parameter budget of a method.
    CountParams(CountArgs),
    /// Run the numerical oracle suites.
    Verify(VerifyArgs),
    /// Evaluate a saved checkpoint on a task split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Save the trained parameters here (overrides `checkpoint` in the file).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CSV file for the run's record (overrides `output` in the file).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Long-form metric curve CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GridArgs {
    /// Grid file; omit when using `--preset`.
    config: Option<PathBuf>,
    /// Prebuilt grid: insertion, representation, composition, budget or combination.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    curves: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Override the training steps of every cell.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the number of seeds per cell.
    #[arg(long)]
    seeds: Option<usize>,
    /// Print the expanded cells without running them.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct CountArgs {
    /// Experiment file with `[model]` and `[method]` or `[[peft]]`.
    config: Option<PathBuf>,
    /// Model preset: desk, bart_large or roberta_base.
    #[arg(long, conflicts_with = "config", default_value = "desk")]
    preset: String,
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    method: Option<String>,
    #[arg(long, default_value_t = 0)]
    bottleneck: usize,
    /// Prefix length of `mam`.
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    s: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment file the checkpoint was trained from.
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, dev or test.
    #[arg(long, default_value = "test")]
    split: String,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_record(r: &RunRecord) {
    println!(
        "{:<40} seed={:<20} params={:<8} rel={:.4}% metric={:.4} steps={} {:.1}s {}",
        r.method,
        r.seed,
        r.tunable_params,
        r.rel_percent,
        r.final_metric,
        r.steps,
        r.wall_seconds,
        r.status.label()
    );
}

fn train(args: TrainArgs) -> Result<bool> {
    let file = parse_experiment(&read(&args.config)?)?;
    let mut exp = file.experiment()?;
    if let Some(s) = args.steps {
        exp.train.total_steps = s;
    }
    if let Some(s) = args.seed {
        exp.train.seed = s;
    }
    println!(
        "{} on {} ({} steps, lr {}, seed {})",
        exp.label,
        exp.task.kind.name(),
        exp.train.total_steps,
        exp.train.learning_rate,
        exp.train.seed
    );
    let (rec, model) = run_experiment_with_model(&exp);
    for (step, m) in &rec.curve {
        println!("step {step:>6}  dev accuracy {m:.4}");
    }
    print_record(&rec);
    if let (Some(path), Some(model)) = (args.checkpoint.or(file.checkpoint), &model) {
        save_checkpoint(&path, model.params())?;
        println!("checkpoint written to {}", path.display());
    }
    if let Some(path) = args.output.or(file.output) {
        emit_csv(std::slice::from_ref(&rec), &path)?;
    }
    if let Some(path) = args.curves {
        emit_curves(std::slice::from_ref(&rec), &path)?;
    }
    Ok(rec.status.is_ok())
}

fn grid(args: GridArgs) -> Result<bool> {
    let (mut g, file_output): (GridSpec, Option<PathBuf>) = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let f = parse_grid(&read(path)?)?;
            (f.grid()?, f.output)
        }
        (None, Some(name)) => (prebuilt_grid(name)?, None),
        _ => unreachable!("checked by the caller"),
    };
    if let Some(s) = args.steps {
        g.train.total_steps = s;
    }
    if let Some(k) = args.seeds {
        g.seeds_per_cell = k;
    }
    if args.dry_run {
        for c in g.cells()? {
            println!("{:<48} lr={}", c.label, c.learning_rate);
        }
        println!("{} experiments", g.experiments()?.len());
        return Ok(true);
    }
    let records = run_grid(&g, args.workers)?;
    for r in &records {
        print_record(r);
    }
    let failed = records.iter().filter(|r| !r.status.is_ok()).count();
    println!("{}: {} runs, {failed} failed", g.name, records.len());
    let output = args.output.or(file_output).unwrap_or_else(|| PathBuf::from(format!("{}.csv", g.name)));
    emit_csv(&records, &output)?;
    println!("results written to {}", output.display());
    if let Some(path) = args.curves {
        emit_curves(&records, &path)?;
    }
    Ok(failed == 0)
}

fn count_params(args: CountArgs) -> Result<bool> {
    let file = match &args.config {
        Some(path) => parse_experiment(&read(path)?)?,
        None => ExperimentFile {
            model: ModelSection {
                preset: Some(args.preset.clone()),
                ..ModelSection::default()
            },
            method: Some(MethodSection {
                name: args.method.clone().unwrap_or_default(),
                bottleneck: args.bottleneck,
                l: args.l,
                s: args.s,
            }),
            ..ExperimentFile::default()
        },
    };
    let report = file.budget()?;
    print!("{report}");
    println!("{}", BudgetReport::CSV_HEADER);
    println!("{}", report.to_csv_row());
    Ok(true)
}

fn run_verify(args: VerifyArgs) -> Result<bool> {
    let reports = verify::run_all(args.seed)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} suites passed", reports.len());
    } else {
        println!("{failed} of {} suites failed", reports.len());
    }
    Ok(failed == 0)
}

fn eval(args: EvalArgs) -> Result<bool> {
    let split = Split::parse(&args.split)?;
    let exp = parse_experiment(&read(&args.config)?)?.experiment()?;
    let acc = evaluate_checkpoint(&exp, &args.checkpoint, split)?;
    println!("{} {} accuracy {acc:.4}", exp.label, args.split);
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Command::Grid(g) = &cli.command {
        if g.config.is_none() && g.preset.is_none() {
            eprintln!("error: give a grid file or --preset ({})", PREBUILT_GRIDS.join(", "));
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Grid(a) => grid(a),
        Command::CountParams(a) => count_params(a),
        Command::Verify(a) => run_verify(a),
        Command::Eval(a) => eval(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
