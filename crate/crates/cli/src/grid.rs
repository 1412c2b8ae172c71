//! Grid runner: the full train / alter / measure / eval pipeline over the
//! method x dim x optimizer x seed product, parallel across encoders,
//! skipping any output file that already exists.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use rmprobe_core::alterations::AlterationPlan;
use rmprobe_core::datagen::{self, Dataset};
use rmprobe_core::downstream::{self, EvalResult};
use rmprobe_core::encoders::{self, EncoderSpec, Model};
use rmprobe_core::error::{Error, Result};
use rmprobe_core::metrics;
use rmprobe_core::training::{self, Method, OptimizerConfig, OptimizerKind, TrainConfig};
use rmprobe_core::trajectories;

use crate::config::GridConfig;
use crate::report;

pub const WORKERS_ENV: &str = "RMPROBE_WORKERS";

struct Job {
    method: Method,
    dim: usize,
    optimizer: OptimizerKind,
    seed: u64,
    id: String,
}

struct Layout {
    models: PathBuf,
    trajectories: PathBuf,
    metrics: PathBuf,
    evals: PathBuf,
}

fn layout(out_dir: &Path) -> Result<Layout> {
    let l = Layout {
        models: out_dir.join("models"),
        trajectories: out_dir.join("trajectories"),
        metrics: out_dir.join("metrics"),
        evals: out_dir.join("evals"),
    };
    for dir in [&l.models, &l.trajectories, &l.metrics, &l.evals] {
        fs::create_dir_all(dir)?;
    }
    Ok(l)
}

pub fn worker_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "{WORKERS_ENV} must be a positive integer, got {raw:?}"
                ))
            })?;
            if n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{WORKERS_ENV} must be a positive integer, got 0"
                )));
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

pub fn run(cfg: &GridConfig, workers: Option<usize>) -> Result<()> {
    cfg.validate()?;
    let l = layout(&cfg.out_dir)?;

    let train_data = datagen::gen_blobs(
        cfg.n_per_class,
        cfg.classes,
        cfg.input_dim,
        cfg.spread,
        cfg.data_seed,
    )?;
    // fixed transfer tasks: rings in the same ambient space, and blobs
    // regenerated under a different seed
    let task_sets = [
        (
            "rings",
            datagen::gen_rings(
                cfg.n_per_class,
                cfg.classes,
                cfg.input_dim,
                cfg.rings_noise,
                cfg.transfer_seed,
            )?,
        ),
        (
            "blobs-shift",
            datagen::gen_blobs(
                cfg.n_per_class,
                cfg.classes,
                cfg.input_dim,
                cfg.spread,
                cfg.transfer_seed,
            )?,
        ),
    ];
    let mut tasks: Vec<(&str, Dataset, Dataset)> = Vec::new();
    for (task_id, data) in task_sets {
        let (reference, queries) =
            downstream::split_dataset(&data, cfg.eval_fraction, cfg.split_seed)?;
        tasks.push((task_id, reference, queries));
    }

    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        for &dim in &cfg.dims {
            for &optimizer in &cfg.optimizers {
                for &seed in &cfg.seeds {
                    jobs.push(Job {
                        method,
                        dim,
                        optimizer,
                        seed,
                        id: format!("{method}-d{dim}-{}-s{seed}", optimizer.name()),
                    });
                }
            }
        }
    }
    eprintln!("grid: {} encoders -> {}", jobs.len(), cfg.out_dir.display());

    let run_all = || -> Result<Vec<()>> {
        jobs.par_iter()
            .map(|job| {
                run_job(cfg, &l, job, &train_data, &tasks).map_err(|e| {
                    eprintln!("grid: {} failed: {e}", job.id);
                    e
                })
            })
            .collect()
    };
    match worker_count(workers)? {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
            pool.install(run_all)?
        }
        None => run_all()?,
    };

    let report = report::assemble(&l.metrics, &l.evals, false)?;
    report::write_json(&cfg.out_dir.join("report.json"), &report)?;
    report::write_scatter_csv(&report, &cfg.out_dir.join("report.csv"))?;
    eprintln!(
        "grid: report written, {} rows, {} warnings",
        report.rows.len(),
        report.warnings.len()
    );
    Ok(())
}

fn run_job(
    cfg: &GridConfig,
    l: &Layout,
    job: &Job,
    train_data: &Dataset,
    tasks: &[(&str, Dataset, Dataset)],
) -> Result<()> {
    let model_path = l.models.join(format!("{}.rmen", job.id));
    let model = if model_path.exists() {
        encoders::load_model(&model_path)?
    } else {
        let spec = EncoderSpec {
            input_dim: train_data.dim(),
            hidden_layers: cfg.hidden.clone(),
            embedding_dim: job.dim,
            num_classes: job.method.needs_head().then(|| train_data.num_classes()),
        };
        let train_cfg = TrainConfig::new(job.method, cfg.epochs, cfg.batch_size, job.seed);
        let (params, history) = training::train(
            &spec,
            train_data,
            &train_cfg,
            &OptimizerConfig::of_kind(job.optimizer),
        )?;
        let mut log = String::new();
        for (epoch, loss) in history.iter().enumerate() {
            log.push_str(&format!("epoch {} loss {loss}\n", epoch + 1));
        }
        fs::write(l.models.join(format!("{}.train.log", job.id)), log)?;
        let model = Model { spec, params };
        encoders::save_model(&model, &model_path)?;
        model
    };

    let traj_path = l.trajectories.join(format!("{}.noise.rmtj", job.id));
    if !traj_path.exists() {
        let mut data = train_data.clone();
        if cfg.trajectory_samples > 0 && cfg.trajectory_samples < data.len() {
            data = take_spread(&data, cfg.trajectory_samples)?;
        }
        let plan = AlterationPlan::noise(cfg.noise_steps, cfg.alter_seed);
        let mut set = trajectories::build_trajectories(&model, &data, &plan, job.method)?;
        set.meta.insert("encoder_id".into(), job.id.clone());
        set.meta
            .insert("optimizer".into(), job.optimizer.name().to_string());
        set.meta.insert("train_seed".into(), job.seed.to_string());
        set.meta
            .insert("alter_seed".into(), cfg.alter_seed.to_string());
        trajectories::write_trajectories(&set, &traj_path)?;
    }

    let metrics_path = l.metrics.join(format!("{}.json", job.id));
    if !metrics_path.exists() {
        let set = trajectories::read_trajectories(&traj_path)?;
        let record = metrics::measure_set(&set)?;
        report::write_json(&metrics_path, &record)?;
    }

    for (task_id, reference, queries) in tasks {
        let eval_path = l.evals.join(format!("{}.{task_id}.json", job.id));
        if eval_path.exists() {
            continue;
        }
        let raw = downstream::encoder_transfer_accuracy(&model, reference, queries)?;
        let result = EvalResult {
            encoder_id: job.id.clone(),
            task_id: task_id.to_string(),
            raw_accuracy: raw,
            normalized_accuracy: None,
        };
        report::write_json(&eval_path, &result)?;
    }
    eprintln!("grid: {} done", job.id);
    Ok(())
}

/// n samples spaced evenly over the row order, so class-major datasets
/// stay balanced.
pub fn take_spread(data: &Dataset, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample cap must be positive".into()));
    }
    let n = n.min(data.len());
    let idx: Vec<usize> = (0..n).map(|i| i * data.len() / n).collect();
    Ok(Dataset {
        inputs: data.inputs.gather_rows(&idx)?,
        labels: idx.iter().map(|&i| data.labels[i]).collect(),
        split: data.split,
    })
}
