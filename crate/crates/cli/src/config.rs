//! Grid configuration: a flat key=value file with repeated keys for list
//! axes. Every key has a default, so an empty file runs the stock grid.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rmprobe_core::error::{Error, Result};
use rmprobe_core::training::{Method, OptimizerKind, ALL_METHODS};

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    pub dims: Vec<usize>,
    pub optimizers: Vec<OptimizerKind>,
    pub seeds: Vec<u64>,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_per_class: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub rings_noise: f64,
    pub data_seed: u64,
    pub transfer_seed: u64,
    pub noise_steps: usize,
    pub alter_seed: u64,
    /// 0 means every training sample gets a trajectory.
    pub trajectory_samples: usize,
    pub eval_fraction: f64,
    pub split_seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            out_dir: PathBuf::from("runs"),
            methods: ALL_METHODS.to_vec(),
            dims: vec![16, 32, 64],
            optimizers: vec![OptimizerKind::SgdNesterov, OptimizerKind::Adam],
            seeds: vec![1, 2, 3],
            hidden: vec![32],
            epochs: 10,
            batch_size: 16,
            n_per_class: 50,
            classes: 4,
            input_dim: 16,
            spread: 0.05,
            rings_noise: 0.01,
            data_seed: 11,
            transfer_seed: 12,
            noise_steps: 100,
            alter_seed: 7,
            trajectory_samples: 0,
            eval_fraction: 0.8,
            split_seed: 3,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let nonempty = [
            ("method", self.methods.is_empty()),
            ("dim", self.dims.is_empty()),
            ("optimizer", self.optimizers.is_empty()),
            ("seed", self.seeds.is_empty()),
        ];
        for (axis, empty) in nonempty {
            if empty {
                return Err(Error::InvalidArgument(format!("grid axis {axis} is empty")));
            }
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "embedding dims must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eval_fraction) {
            return Err(Error::InvalidArgument(format!(
                "eval_fraction must be in [0,1], got {}",
                self.eval_fraction
            )));
        }
        Ok(())
    }
}

pub fn parse_config(path: &Path) -> Result<GridConfig> {
    let text = fs::read_to_string(path)?;
    let mut cfg = GridConfig::default();
    // the first occurrence of a list key replaces its default
    let mut replaced: BTreeSet<&'static str> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| Error::Config {
            path: path.display().to_string(),
            line: line_no,
            detail,
        };
        let Some((k, v)) = line.split_once('=') else {
            return Err(err(format!("expected key = value, got {line:?}")));
        };
        let key = k.trim();
        let value = v.trim();
        if value.is_empty() {
            return Err(err(format!("field {key:?} has no value")));
        }
        macro_rules! parse_as {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| {
                    err(format!(
                        "field {key:?}: cannot parse {value:?} as {}",
                        stringify!($ty)
                    ))
                })?
            };
        }
        match key {
            "out_dir" => cfg.out_dir = PathBuf::from(value),
            "method" => {
                if replaced.insert("method") {
                    cfg.methods.clear();
                }
                let m = Method::parse(value).map_err(|e| err(format!("field \"method\": {e}")))?;
                cfg.methods.push(m);
            }
            "dim" => {
                if replaced.insert("dim") {
                    cfg.dims.clear();
                }
                cfg.dims.push(parse_as!(usize));
            }
            "optimizer" => {
                if replaced.insert("optimizer") {
                    cfg.optimizers.clear();
                }
                let o = OptimizerKind::parse(value)
                    .map_err(|e| err(format!("field \"optimizer\": {e}")))?;
                cfg.optimizers.push(o);
            }
            "seed" => {
                if replaced.insert("seed") {
                    cfg.seeds.clear();
                }
                cfg.seeds.push(parse_as!(u64));
            }
            "hidden" => {
                cfg.hidden = value
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<usize>()
                            .map_err(|_| err(format!("field \"hidden\": bad layer width {p:?}")))
                    })
                    .collect::<Result<_>>()?;
            }
            "epochs" => cfg.epochs = parse_as!(usize),
            "batch_size" => cfg.batch_size = parse_as!(usize),
            "n_per_class" => cfg.n_per_class = parse_as!(usize),
            "classes" => cfg.classes = parse_as!(usize),
            "input_dim" => cfg.input_dim = parse_as!(usize),
            "spread" => cfg.spread = parse_as!(f64),
            "rings_noise" => cfg.rings_noise = parse_as!(f64),
            "data_seed" => cfg.data_seed = parse_as!(u64),
            "transfer_seed" => cfg.transfer_seed = parse_as!(u64),
            "noise_steps" => cfg.noise_steps = parse_as!(usize),
            "alter_seed" => cfg.alter_seed = parse_as!(u64),
            "trajectory_samples" => cfg.trajectory_samples = parse_as!(usize),
            "eval_fraction" => cfg.eval_fraction = parse_as!(f64),
            "split_seed" => cfg.split_seed = parse_as!(u64),
            unknown => return Err(err(format!("unknown key {unknown:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
