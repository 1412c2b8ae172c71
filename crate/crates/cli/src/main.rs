//! rmprobe: generate data, train encoders, alter inputs, trace embedding
//! trajectories, score manifold characteristics, and correlate the score
//! with 1-NN transfer accuracy.

mod config;
mod grid;
mod report;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rmprobe_core::alterations::{
    AlterationPlan, DEFAULT_EPSILON_FGSM, DEFAULT_NOISE_STEPS, DEFAULT_PGD_ITERATIONS,
};
use rmprobe_core::datagen;
use rmprobe_core::downstream::{self, EvalResult};
use rmprobe_core::encoders::{self, EncoderSpec, Model};
use rmprobe_core::error::{Error, Result};
use rmprobe_core::metrics::{self, StepPrefactor};
use rmprobe_core::training::{self, Method, OptimizerConfig, OptimizerKind, TrainConfig};
use rmprobe_core::trajectories;

#[derive(Parser)]
#[command(
    name = "rmprobe",
    version,
    about = "Probe the representation manifolds of learned encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write it as CSV.
    GenData(GenDataArgs),
    /// Train an encoder and save it as a model file.
    Train(TrainArgs),
    /// Apply an alteration schedule and record embedding trajectories.
    Alter(AlterArgs),
    /// Score a trajectory file: D, D_RC, P_RC, rmqm.
    Measure(MeasureArgs),
    /// 1-NN transfer accuracy of a saved encoder on a task dataset.
    Eval(EvalArgs),
    /// Join metric and eval files into a correlation report.
    Report(ReportArgs),
    /// Run the whole pipeline over a method/dim/optimizer/seed grid.
    Grid(GridArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Blobs,
    Rings,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long, default_value_t = 50)]
    n_per_class: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Cluster standard deviation (blobs only).
    #[arg(long, default_value_t = 0.05)]
    spread: f64,
    /// Radial jitter (rings only).
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// cross-entropy | triplet-sup | triplet-ss | nt-xent | triplet-entropy
    #[arg(long)]
    method: String,
    /// Embedding dimension.
    #[arg(long)]
    dim: usize,
    /// Comma-separated hidden layer widths; empty for none.
    #[arg(long, default_value = "32")]
    hidden: String,
    /// sgd | adam
    #[arg(long, default_value = "adam")]
    opt: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    #[arg(long, default_value_t = 0.5)]
    temperature: f64,
    #[arg(long, default_value_t = 0.1)]
    aug_strength: f64,
    #[arg(long, default_value_t = 0.2)]
    aug_mask_prob: f64,
    /// Write the per-epoch loss history here instead of stderr.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlterCmdKind {
    Noise,
    Pgd,
}

#[derive(Args)]
struct AlterArgs {
    #[arg(long, value_enum)]
    kind: AlterCmdKind,
    /// Noise steps J (default 100).
    #[arg(long)]
    steps: Option<usize>,
    /// Gradient-walk iterations (default 30).
    #[arg(long)]
    iters: Option<usize>,
    /// Per-iteration gradient-walk step size (default 2/255).
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss the gradient walk ascends; required for pgd.
    #[arg(long)]
    method: Option<String>,
    /// Cap trajectories to this many samples, spaced evenly.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct MeasureArgs {
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Leave the per-sample rows out of the JSON.
    #[arg(long)]
    skip_per_sample: bool,
    /// steps divides the previous-step sum by J, terms by J-1.
    #[arg(long, default_value = "steps")]
    prefactor: String,
    /// Also write the per-step mean series as CSV.
    #[arg(long)]
    series_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Task dataset CSV; split into reference and query sets.
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 1)]
    split_seed: u64,
    /// Defaults to the model file stem.
    #[arg(long)]
    encoder_id: Option<String>,
    /// Defaults to the task file stem.
    #[arg(long)]
    task_id: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of measure JSON files.
    #[arg(long)]
    metrics: PathBuf,
    /// Directory of eval JSON files.
    #[arg(long)]
    evals: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-row scatter data as CSV.
    #[arg(long)]
    scatter_out: Option<PathBuf>,
    /// Correlate gradient-walk records too, not only noise ones.
    #[arg(long)]
    include_pgd: bool,
}

#[derive(Args)]
struct GridArgs {
    /// key = value config file; repeated keys build the grid axes.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the configured methods (repeatable).
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Override the configured embedding dims (repeatable).
    #[arg(long = "dim")]
    dims: Vec<usize>,
    /// Override the configured optimizers (repeatable).
    #[arg(long = "optimizer")]
    optimizers: Vec<String>,
    /// Override the configured seeds (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Parallel encoder jobs; also settable via RMPROBE_WORKERS.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; those exit 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenData(args) => run_gen_data(args),
        Cmd::Train(args) => run_train(args),
        Cmd::Alter(args) => run_alter(args),
        Cmd::Measure(args) => run_measure(args),
        Cmd::Eval(args) => run_eval(args),
        Cmd::Report(args) => run_report(args),
        Cmd::Grid(args) => run_grid(args),
    }
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let data = match args.kind {
        DataKind::Blobs => datagen::gen_blobs(
            args.n_per_class,
            args.classes,
            args.dim,
            args.spread,
            args.seed,
        )?,
        DataKind::Rings => datagen::gen_rings(
            args.n_per_class,
            args.classes,
            args.dim,
            args.noise,
            args.seed,
        )?,
    };
    datagen::write_csv(&data, &args.out)?;
    eprintln!(
        "wrote {} samples x {} dims, {} classes -> {}",
        data.len(),
        data.dim(),
        data.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn parse_hidden(raw: &str) -> Result<Vec<usize>> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad hidden layer width {p:?}")))
        })
        .collect()
}

fn run_train(args: TrainArgs) -> Result<()> {
    let method = Method::parse(&args.method)?;
    let optimizer = OptimizerKind::parse(&args.opt)?;
    let data = datagen::read_csv(&args.data)?;
    let spec = EncoderSpec {
        input_dim: data.dim(),
        hidden_layers: parse_hidden(&args.hidden)?,
        embedding_dim: args.dim,
        num_classes: method.needs_head().then(|| data.num_classes()),
    };
    let mut cfg = TrainConfig::new(method, args.epochs, args.batch_size, args.seed);
    cfg.margin = args.margin;
    cfg.temperature = args.temperature;
    cfg.aug_strength = args.aug_strength;
    cfg.aug_mask_prob = args.aug_mask_prob;
    let (params, history) =
        training::train(&spec, &data, &cfg, &OptimizerConfig::of_kind(optimizer))?;
    let mut log = String::new();
    for (epoch, loss) in history.iter().enumerate() {
        log.push_str(&format!("epoch {} loss {loss}\n", epoch + 1));
    }
    match &args.log {
        Some(path) => fs::write(path, log)?,
        None => eprint!("{log}"),
    }
    encoders::save_model(&Model { spec, params }, &args.out)?;
    eprintln!("saved model to {}", args.out.display());
    Ok(())
}

fn run_alter(args: AlterArgs) -> Result<()> {
    let model = encoders::load_model(&args.model)?;
    let mut data = datagen::read_csv(&args.data)?;
    if let Some(n) = args.samples {
        data = grid::take_spread(&data, n)?;
    }
    let plan = match args.kind {
        AlterCmdKind::Noise => {
            if args.iters.is_some() || args.eps.is_some() {
                return Err(Error::InvalidArgument(
                    "--iters and --eps apply to pgd alterations only".into(),
                ));
            }
            AlterationPlan::noise(args.steps.unwrap_or(DEFAULT_NOISE_STEPS), args.seed)
        }
        AlterCmdKind::Pgd => AlterationPlan::pgd(
            args.iters.or(args.steps).unwrap_or(DEFAULT_PGD_ITERATIONS),
            args.eps.unwrap_or(DEFAULT_EPSILON_FGSM),
            args.seed,
        ),
    };
    let method = match (&args.method, args.kind) {
        (Some(raw), _) => Some(Method::parse(raw)?),
        (None, AlterCmdKind::Pgd) => {
            return Err(Error::InvalidArgument(
                "--method is required for pgd: the walk ascends that loss".into(),
            ))
        }
        (None, AlterCmdKind::Noise) => None,
    };
    let mut set =
        trajectories::build_trajectories(&model, &data, &plan, method.unwrap_or(Method::NtXent))?;
    if method.is_none() {
        set.meta.remove("method");
    }
    set.meta
        .insert("encoder_id".into(), report::file_stem(&args.model));
    set.meta.insert("alter_seed".into(), args.seed.to_string());
    if matches!(args.kind, AlterCmdKind::Pgd) {
        set.meta
            .insert("epsilon_fgsm".into(), format!("{}", plan.epsilon_fgsm));
    }
    trajectories::write_trajectories(&set, &args.out)?;
    eprintln!(
        "wrote {} trajectories of {} steps -> {}",
        set.len(),
        set.steps,
        args.out.display()
    );
    Ok(())
}

fn run_measure(args: MeasureArgs) -> Result<()> {
    let set = trajectories::read_trajectories(&args.traj)?;
    let prefactor = match args.prefactor.as_str() {
        "steps" => StepPrefactor::StepCount,
        "terms" => StepPrefactor::TermCount,
        other => {
            return Err(Error::InvalidArgument(format!(
                "--prefactor must be steps or terms, got {other:?}"
            )))
        }
    };
    let mut record = metrics::measure_set_with(&set, prefactor)?;
    if args.skip_per_sample {
        record.per_sample.clear();
    }
    report::write_json(&args.out, &record)?;
    if let Some(path) = &args.series_out {
        let mut csv = String::from("series,step,n,mean,std,se\n");
        for point in metrics::distance_series(&set)? {
            csv.push_str(&format!(
                "distance,{},{},{},{},{}\n",
                point.step, point.n, point.mean, point.std, point.se
            ));
        }
        for point in metrics::relative_change_series(&set)? {
            csv.push_str(&format!(
                "relative_change,{},{},{},{},{}\n",
                point.step, point.n, point.mean, point.std, point.se
            ));
        }
        fs::write(path, csv)?;
    }
    eprintln!(
        "d {:.6}  d_rc {:.6}  p_rc {:.6}  rmqm {:.6} -> {}",
        record.d.mean,
        record.d_rc.mean,
        record.p_rc.mean,
        record.rmqm,
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let model = encoders::load_model(&args.model)?;
    let task = datagen::read_csv(&args.task)?;
    let (reference, queries) =
        downstream::split_dataset(&task, args.train_fraction, args.split_seed)?;
    let raw = downstream::encoder_transfer_accuracy(&model, &reference, &queries)?;
    let result = EvalResult {
        encoder_id: args
            .encoder_id
            .unwrap_or_else(|| report::file_stem(&args.model)),
        task_id: args
            .task_id
            .unwrap_or_else(|| report::file_stem(&args.task)),
        raw_accuracy: raw,
        normalized_accuracy: None,
    };
    report::write_json(&args.out, &result)?;
    eprintln!(
        "{} on {}: accuracy {:.4}",
        result.encoder_id, result.task_id, raw
    );
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let report = report::assemble(&args.metrics, &args.evals, args.include_pgd)?;
    report::write_json(&args.out, &report)?;
    if let Some(path) = &args.scatter_out {
        report::write_scatter_csv(&report, path)?;
    }
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    eprintln!(
        "report: {} rows, r(rmqm, perf) = {:?} -> {}",
        report.rows.len(),
        report.r_rmqm_performance,
        args.out.display()
    );
    Ok(())
}

fn run_grid(args: GridArgs) -> Result<()> {
    let mut cfg = config::parse_config(&args.config)?;
    if let Some(dir) = args.out_dir {
        cfg.out_dir = dir;
    }
    if !args.methods.is_empty() {
        cfg.methods = args
            .methods
            .iter()
            .map(|m| Method::parse(m))
            .collect::<Result<_>>()?;
    }
    if !args.dims.is_empty() {
        cfg.dims = args.dims.clone();
    }
    if !args.optimizers.is_empty() {
        cfg.optimizers = args
            .optimizers
            .iter()
            .map(|o| OptimizerKind::parse(o))
            .collect::<Result<_>>()?;
    }
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    grid::run(&cfg, args.workers)
}
