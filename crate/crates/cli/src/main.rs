use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retr::data::SyntheticSpec;
use retr::experiment::{
    apply_synth_entries, inspect_routes, read_entries, run_eval, run_synth, run_train, EvalRequest, ExperimentError,
    RunConfig, SplitPart,
};

#[derive(Parser)]
#[command(name = "retr", version, about = "Sequential recommendation with pathway-routed attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted pivotal labels.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint, epoch log and test report.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Print per-layer hard routes for chosen users.
    InspectRoutes(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// correlated, casual, drifted, or all.
    #[arg(long)]
    archetype: Option<String>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    drift_fraction: Option<f64>,
    #[arg(long)]
    max_stride: Option<usize>,
}

#[derive(Args)]
struct RunFlags {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interaction file, `user<TAB>item<TAB>timestamp`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pivotal label sidecar for route diagnostics.
    #[arg(long)]
    pivots: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// learned or all-ones.
    #[arg(long)]
    routing: Option<String>,
    /// global or causal.
    #[arg(long)]
    router_pooling: Option<String>,
    /// st or soft.
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Cutoffs for HR and NDCG, comma separated.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    min_count: Option<usize>,
    /// rayon or sequential.
    #[arg(long)]
    parallelism: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// test, validation, or train.
    #[arg(long, default_value = "test")]
    split: SplitPart,
    /// Write route and attention CSVs under `routes/`.
    #[arg(long)]
    export_routes: bool,
    /// Raw user ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    users: Vec<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw user ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    users: Vec<String>,
}

type Entries = Vec<(String, String)>;

fn push<V: ToString>(out: &mut Entries, key: &str, v: &Option<V>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.to_string()));
    }
}

fn file_entries(path: &Option<PathBuf>) -> Result<Entries, ExperimentError> {
    match path {
        Some(p) if !p.exists() => Err(ExperimentError::Usage(format!("config not found: {}", p.display()))),
        Some(p) => read_entries(p),
        None => Ok(Vec::new()),
    }
}

impl RunFlags {
    fn entries(&self) -> Result<Entries, ExperimentError> {
        let mut e = file_entries(&self.config)?;
        push(&mut e, "data", &self.data.as_ref().map(|p| p.display()));
        push(&mut e, "pivots", &self.pivots.as_ref().map(|p| p.display()));
        push(&mut e, "seed", &self.seed);
        push(&mut e, "blocks", &self.blocks);
        push(&mut e, "heads", &self.heads);
        push(&mut e, "dim", &self.dim);
        push(&mut e, "max_len", &self.max_len);
        push(&mut e, "tau", &self.tau);
        push(&mut e, "routing", &self.routing);
        push(&mut e, "router_pooling", &self.router_pooling);
        push(&mut e, "sampling", &self.sampling);
        push(&mut e, "negatives", &self.negatives);
        push(&mut e, "k", &self.k);
        push(&mut e, "max_epochs", &self.epochs);
        push(&mut e, "patience", &self.patience);
        push(&mut e, "batch_size", &self.batch_size);
        push(&mut e, "learning_rate", &self.learning_rate);
        push(&mut e, "min_count", &self.min_count);
        push(&mut e, "parallelism", &self.parallelism);
        Ok(e)
    }

    fn resolve(&self) -> Result<(RunConfig, Vec<String>), ExperimentError> {
        let entries = self.entries()?;
        let mut cfg = RunConfig::default();
        cfg.apply(&entries)?;
        let keys = entries.into_iter().map(|(k, _)| k).collect();
        Ok((cfg, keys))
    }
}

fn synth(args: &SynthArgs) -> Result<(), ExperimentError> {
    let mut e = file_entries(&args.config)?;
    push(&mut e, "seed", &args.seed);
    push(&mut e, "users", &args.users);
    push(&mut e, "items", &args.items);
    push(&mut e, "categories", &args.categories);
    push(&mut e, "min_len", &args.min_len);
    push(&mut e, "max_len", &args.max_len);
    push(&mut e, "archetype", &args.archetype);
    push(&mut e, "noise_rate", &args.noise_rate);
    push(&mut e, "drift_fraction", &args.drift_fraction);
    push(&mut e, "max_stride", &args.max_stride);
    let mut spec = SyntheticSpec::default();
    apply_synth_entries(&mut spec, &e)?;
    let s = run_synth(&spec, &args.out)?;
    println!("wrote {} users, {} interactions to {}", s.users, s.records, args.out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<(), ExperimentError> {
    let (cfg, _) = args.run.resolve()?;
    let stdout = io::stdout();
    let summary = run_train(&cfg, &args.out, &mut stdout.lock())?;
    print!("{}", summary.test);
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), ExperimentError> {
    let (cfg, keys) = args.run.resolve()?;
    let report = run_eval(&EvalRequest {
        config: &cfg,
        user_keys: &keys,
        checkpoint: &args.checkpoint,
        out: &args.out,
        split: args.split,
        export_routes: args.export_routes,
        users: &args.users,
    })?;
    print!("{report}");
    Ok(())
}

fn inspect(args: &InspectArgs) -> Result<(), ExperimentError> {
    let (cfg, keys) = args.run.resolve()?;
    let reports = inspect_routes(&cfg, &keys, &args.checkpoint, &args.users)?;
    let mut out = io::stdout().lock();
    for r in reports {
        let _ = write!(out, "{}", r.render());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::InspectRoutes(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
