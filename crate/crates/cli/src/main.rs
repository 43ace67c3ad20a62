use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use relmap::data::{Experiment, DATA_DIR_ENV};
use relmap::record::{mean_sd, RunRecord};
use relmap::supervised::SparsityKind;
use relmap::unsupervised::TaskScore;
use relmap_cli::config::{RunConfig, RunMode};
use relmap_cli::run;

#[derive(Parser)]
#[command(name = "relmap", version, about = "Continual learning with relevance-mapped networks")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed, writing records and checkpoints.
    Train(TrainArgs),
    /// Print per-task and average test accuracy of a checkpoint.
    Eval(CheckpointArgs),
    /// Infer the task of every sample in a shuffled pool of all test sets.
    Infer(InferArgs),
    /// Compare the detections in a streaming run against the true boundaries.
    DetectAudit(AuditArgs),
    /// Write CSV tables and SVG charts from run records.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<Experiment>,
    #[arg(long)]
    mode: Option<RunMode>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long = "lr-w")]
    lr_w: Option<f64>,
    #[arg(long = "lr-m")]
    lr_m: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sparsity: Option<SparsityKind>,
    #[arg(long = "sparsity-coeff")]
    sparsity_coeff: Option<f64>,
    /// Weight of the Gaussian-noise logit penalty.
    #[arg(long)]
    gaussian: Option<f64>,
    /// Transition length in batches for fuzzy streams.
    #[arg(long)]
    ramp: Option<usize>,
    /// Confidence above which a finished task claims a sample.
    #[arg(long)]
    tau: Option<f64>,
    /// Number of seeds, run one after another.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long = "seed-base")]
    seed_base: Option<u64>,
    #[arg(long = "data-dir", env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs of this configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "data-dir", env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Seed for shuffling the inference pool.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    /// How each sample's task is chosen.
    #[arg(long, value_enum, default_value_t = ScoreArg::Confidence)]
    score: ScoreArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    /// Most confident prediction over the task masks.
    Confidence,
    /// Closest match to each task's first-layer batch-norm statistics.
    BnFit,
}

impl From<ScoreArg> for TaskScore {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Confidence => TaskScore::Confidence,
            ScoreArg::BnFit => TaskScore::BatchNormFit,
        }
    }
}

#[derive(Args)]
struct AuditArgs {
    /// Record files or directories containing them.
    #[arg(required = true)]
    records: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Record files or directories containing them.
    #[arg(required = true)]
    records: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    apply!(experiment, mode, epochs, batch, lr_w, lr_m, mu, beta, sparsity, sparsity_coeff, ramp, tau, seeds, seed_base, out);
    if a.tasks.is_some() {
        cfg.tasks = a.tasks;
    }
    if a.gaussian.is_some() {
        cfg.gaussian = a.gaussian;
    }
    if a.data_dir.is_some() {
        cfg.data_dir = a.data_dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let outcomes = run::train(&cfg, a.force)?;
    println!("run {}", cfg.run_id()?);
    for o in &outcomes {
        let accs: Vec<String> = o.accuracies.iter().map(|v| format!("{v:.4}")).collect();
        let note = if o.skipped { " (already complete)" } else { "" };
        println!(
            "seed {}: mean {:.4} [{}] in {}{note}",
            o.seed,
            o.mean_accuracy,
            accs.join(", "),
            o.dir.display()
        );
    }
    let means: Vec<f64> = outcomes.iter().map(|o| o.mean_accuracy).collect();
    let (m, sd) = mean_sd(&means)?;
    println!("mean accuracy over {} seed(s): {m:.4} ± {sd:.4}", means.len());
    Ok(())
}

fn cmd_eval(a: &CheckpointArgs) -> Result<()> {
    let loaded = run::load_checkpoint(&a.checkpoint, a.data_dir.as_deref())?;
    let accs = run::eval(&loaded)?;
    let mut seen = Vec::new();
    for (t, acc) in accs.iter().enumerate() {
        match acc {
            Some(v) => {
                println!("task {t} ({}): {v:.4}", loaded.stream.tasks()[t].name);
                seen.push(*v);
            }
            None => println!("task {t} ({}): not learned", loaded.stream.tasks()[t].name),
        }
    }
    if seen.is_empty() {
        anyhow::bail!("checkpoint has no finished task");
    }
    println!("mean: {:.4}", seen.iter().sum::<f64>() / seen.len() as f64);
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let ck = &a.checkpoint;
    let loaded = run::load_checkpoint(&ck.checkpoint, ck.data_dir.as_deref())?;
    let confusion = run::infer(&loaded, ck.seed, a.score.into())?;
    let n = confusion.len();
    print!("{:>8}", "true\\inf");
    for k in 0..n {
        print!("{k:>8}");
    }
    println!("{:>8}", "other");
    let mut correct = 0;
    let mut total = 0;
    for (t, row) in confusion.iter().enumerate() {
        print!("{t:>8}");
        for c in row {
            print!("{c:>8}");
        }
        println!();
        correct += row[t];
        total += row.iter().sum::<usize>();
    }
    println!("task-id accuracy: {:.4} ({correct}/{total})", correct as f64 / total.max(1) as f64);
    Ok(())
}

fn cmd_audit(a: &AuditArgs) -> Result<()> {
    for path in run::collect_records(&a.records)? {
        let rec = RunRecord::load(&path).with_context(|| format!("reading {}", path.display()))?;
        let audit = run::audit(&rec)?;
        println!("{} (window {})", path.display(), audit.window);
        for b in &audit.boundaries {
            match (b.detection, b.latency()) {
                (Some(d), Some(l)) => println!("  boundary {:>6}: detected at {d:>6}, latency {l:+}", b.boundary),
                _ => println!("  boundary {:>6}: missed", b.boundary),
            }
        }
        for d in &audit.spurious {
            println!("  spurious detection at {d}");
        }
        println!(
            "  {}",
            if audit.passes(2) {
                "all boundaries found within 2 windows"
            } else {
                "boundaries missed, late or spurious"
            }
        );
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let paths = run::collect_records(&a.records)?;
    let records = paths
        .iter()
        .map(|p| RunRecord::load(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    for f in relmap::report::emit_report(&records, &a.out)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::DetectAudit(a) => cmd_audit(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
