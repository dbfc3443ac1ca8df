use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ttzo::rng::GOLDEN_NORMALS;
use ttzo::tensor_train::REFERENCE_SHAPES;
use ttzo_bench::alloc_probe::CountingAlloc;
use ttzo_bench::config::{keys_help, RunConfig};
use ttzo_bench::experiment::{run_train, RunError};
use ttzo_bench::{compare, contract_bench, variance, verify};

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "ttzo", version, about = "Zeroth-order fine-tuning of tensor-train adapters", after_long_help = keys_help())]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once; writes metrics.jsonl and summary.json. Exit 2 if the run diverges.
    #[command(after_long_help = keys_help())]
    Train(TrainArgs),
    /// Run two configs over seeds 0..N and compare them.
    Compare(CompareArgs),
    /// Gradient-noise table E||g_Q - g||^2 per query count.
    Variance(VarianceArgs),
    /// Time sequential vs grouped TT contraction on the reference shapes.
    ContractBench(BenchArgs),
    /// Run the invariant suite and print a JSON report.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (`section.key = value`); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Config of arm A.
    #[arg(long)]
    a: PathBuf,
    /// Config of arm B.
    #[arg(long)]
    b: PathBuf,
    /// Number of seeds per arm (seeds 0..N).
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VarianceArgs {
    /// Probe this configured model instead of the quadratic.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Query counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    q: Vec<usize>,
    /// Estimates per query count (at least 1000).
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Quadratic dimensions.
    #[arg(long, value_delimiter = ',', default_value = "10,40,160")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the TSV table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// TT ranks.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    ranks: Vec<usize>,
    /// Timed repetitions per combination.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Reference-table rows (0-7); all by default.
    #[arg(long, value_delimiter = ',')]
    rows: Vec<usize>,
    /// Write the TSV table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Gaussian-stream table to check instead of the built-in one.
    #[arg(long)]
    golden: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(path: Option<&Path>) -> Result<RunConfig, RunError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), RunError> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("never".into(), |x| format!("{x:.1}"))
}

fn train_cmd(args: TrainArgs, quiet: bool) -> Result<u8, RunError> {
    let cfg = load(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let dir = args.out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let outcome = run_train(&cfg, seed, Some(&dir))?;
    let s = &outcome.summary;
    if !quiet {
        eprintln!(
            "{} steps, best eval {:?}, steps to {} {:?}, {}",
            s.steps_run,
            s.best_eval_loss,
            s.threshold,
            s.steps_to_threshold,
            if s.diverged { "DIVERGED" } else { "completed" }
        );
        eprintln!("wrote {}", dir.display());
    }
    Ok(if s.diverged { EXIT_DIVERGED } else { 0 })
}

fn compare_cmd(args: CompareArgs, quiet: bool) -> Result<u8, RunError> {
    let a = RunConfig::load(&args.a)?;
    let b = RunConfig::load(&args.b)?;
    let report = compare::run_compare(&a, &b, args.seeds)?;
    if !quiet {
        for (arm, path) in report.arms.iter().zip([&args.a, &args.b]) {
            eprintln!(
                "{} ({}): diverged {:.0}%, reached {}/{}, median steps {}, median wall ms {}",
                arm.label,
                path.display(),
                100.0 * arm.divergence_rate,
                arm.reached,
                report.seeds,
                fmt_opt(arm.median_steps_to_threshold),
                fmt_opt(arm.median_wall_ms_to_threshold)
            );
        }
    }
    let text = serde_json::to_string_pretty(&report).map_err(std::io::Error::from)? + "\n";
    emit(args.out.as_deref(), &text)?;
    Ok(0)
}

fn variance_cmd(args: VarianceArgs) -> Result<u8, RunError> {
    let lines = match &args.config {
        Some(p) => variance::model_probe(&RunConfig::load(p)?, &args.q, args.trials, args.seed)?,
        None => variance::quadratic_sweep(&args.dims, &args.q, args.trials, 1e-3, args.seed)?,
    };
    emit(args.out.as_deref(), &variance::to_tsv(&lines))?;
    Ok(0)
}

fn bench_cmd(args: BenchArgs) -> Result<u8, String> {
    let rows: Vec<usize> = if args.rows.is_empty() { (0..REFERENCE_SHAPES.len()).collect() } else { args.rows };
    if let Some(bad) = rows.iter().find(|&&r| r >= REFERENCE_SHAPES.len()) {
        return Err(format!("no reference row {bad}"));
    }
    let table = contract_bench::run(&rows, &args.ranks, args.reps, 0).map_err(|e| e.to_string())?;
    emit(args.out.as_deref(), &contract_bench::to_tsv(&table)).map_err(|e| e.to_string())?;
    Ok(0)
}

fn verify_cmd(args: VerifyArgs, quiet: bool) -> Result<u8, RunError> {
    let golden = match &args.golden {
        Some(p) => std::fs::read_to_string(p)?,
        None => GOLDEN_NORMALS.to_string(),
    };
    let report = verify::run_all(&golden);
    let text = serde_json::to_string_pretty(&report).map_err(std::io::Error::from)? + "\n";
    emit(args.out.as_deref(), &text)?;
    for c in report.failures() {
        eprintln!("FAILED {}::{}: {}", c.module, c.name, c.detail);
    }
    if !quiet {
        let gating = report.checks.iter().filter(|c| c.gating).count();
        eprintln!("{}/{gating} gating checks passed", gating - report.failures().count());
    }
    Ok(if report.passed { 0 } else { EXIT_USAGE })
}

fn main() -> ExitCode {
    // clap exits 2 on usage errors, which is reserved for divergence here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train_cmd(a, cli.quiet).map_err(|e| e.to_string()),
        Command::Compare(a) => compare_cmd(a, cli.quiet).map_err(|e| e.to_string()),
        Command::Variance(a) => variance_cmd(a).map_err(|e| e.to_string()),
        Command::ContractBench(a) => bench_cmd(a),
        Command::Verify(a) => verify_cmd(a, cli.quiet).map_err(|e| e.to_string()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
