//! Representation trajectories: one encoder applied to a sample's whole
//! alteration sequence gives a (J+1) x dim path through embedding space.
//! Sets of trajectories carry labels and run metadata and persist in a
//! binary interchange format, so externally produced embeddings can be
//! scored by the same metrics.
//!
//! Points are stored as float32 on disk. Building and reading both leave
//! every in-memory value on the f32 grid, so build -> write -> read
//! round-trips are bit-exact while the metric math runs in f64.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::alterations::{self, AlterationKind, AlterationPlan};
use crate::datagen::Dataset;
use crate::encoders::{self, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Method;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"RMTJ";
pub const TRAJECTORY_VERSION: u32 = 1;

pub const DEFAULT_AUG_STRENGTH: f64 = 0.1;
pub const DEFAULT_AUG_MASK_PROB: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_index: usize,
    pub label: i32,
    /// (J+1) x dim, row-major; row 0 is the unaltered representation.
    points: Vec<f64>,
    dim: usize,
}

impl Trajectory {
    pub fn new(sample_index: usize, label: i32, points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::shape(
                "trajectory",
                format!("{} points do not form rows of width {dim}", points.len()),
            ));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory point".into()));
        }
        Ok(Trajectory {
            sample_index,
            label,
            points,
            dim,
        })
    }

    /// Number of rows, J+1.
    pub fn rows(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn raw(&self) -> &[f64] {
        &self.points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub trajectories: Vec<Trajectory>,
    pub embedding_dim: usize,
    /// Alteration step count J; every trajectory has J+1 rows.
    pub steps: usize,
    pub labels_present: bool,
    /// Free-form key=value run metadata carried in the file.
    pub meta: BTreeMap<String, String>,
}

impl TrajectorySet {
    pub fn validate(&self) -> Result<()> {
        for t in &self.trajectories {
            if t.dim() != self.embedding_dim || t.rows() != self.steps + 1 {
                return Err(Error::shape(
                    "trajectory set",
                    format!(
                        "trajectory {}: {} rows x {} dim, set claims {} x {}",
                        t.sample_index,
                        t.rows(),
                        t.dim(),
                        self.steps + 1,
                        self.embedding_dim
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Run the full alteration-and-encode pipeline for every dataset sample.
/// Samples are processed in parallel; the result is a pure function of
/// (model, data, plan, method).
pub fn build_trajectories(
    model: &Model,
    data: &Dataset,
    plan: &AlterationPlan,
    method: Method,
) -> Result<TrajectorySet> {
    plan.validate()?;
    data.validate()?;
    if model.spec.input_dim != data.dim() {
        return Err(Error::shape(
            "build_trajectories",
            format!(
                "model input_dim {} vs dataset dim {}",
                model.spec.input_dim,
                data.dim()
            ),
        ));
    }

    let trajectories: Result<Vec<Trajectory>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = Tensor::from_parts(vec![data.dim()], data.inputs.row(i).to_vec());
            let seq = match plan.kind {
                AlterationKind::Noise => alterations::white_noise_sequence(&x, plan, i)?,
                AlterationKind::Pgd => {
                    let aux = alterations::choose_aux(
                        data,
                        i,
                        method,
                        plan.master_seed,
                        DEFAULT_AUG_STRENGTH,
                        DEFAULT_AUG_MASK_PROB,
                    )?;
                    alterations::pgd_sequence(&x, &aux, model, method, plan)?
                }
            };
            let rows = seq.inputs.len();
            let mut stacked = Vec::with_capacity(rows * data.dim());
            for step in &seq.inputs {
                stacked.extend_from_slice(step.data());
            }
            let batch = Tensor::from_parts(vec![rows, data.dim()], stacked);
            let embedded = encoders::encode(&model.params, &model.spec, &batch)?;
            let points: Vec<f64> = embedded
                .data()
                .iter()
                .map(|&v| f64::from(v as f32))
                .collect();
            Trajectory::new(i, data.labels[i] as i32, points, model.spec.embedding_dim)
        })
        .collect();

    let mut meta = BTreeMap::new();
    meta.insert("method".to_string(), method.name().to_string());
    meta.insert("alteration".to_string(), plan.kind.name().to_string());
    meta.insert(
        "embedding_dim".to_string(),
        model.spec.embedding_dim.to_string(),
    );
    Ok(TrajectorySet {
        trajectories: trajectories?,
        embedding_dim: model.spec.embedding_dim,
        steps: plan.steps,
        labels_present: true,
        meta,
    })
}

/// Points are written as float32. Sets coming out of [`build_trajectories`]
/// or [`read_trajectories`] are already on that grid, so writing them loses
/// nothing; hand-built sets with finer values are rounded.
pub fn write_trajectories(set: &TrajectorySet, path: &Path) -> Result<()> {
    set.validate()?;
    let fmt = |d: String| Error::format(path.display().to_string(), d);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAJECTORY_MAGIC)?;
    w.write_u32::<LittleEndian>(TRAJECTORY_VERSION)?;
    let as_u32 = |v: usize, what: &str| -> Result<u32> {
        u32::try_from(v).map_err(|_| fmt(format!("{what} {v} exceeds u32 range")))
    };
    w.write_u32::<LittleEndian>(as_u32(set.len(), "trajectory count")?)?;
    w.write_u32::<LittleEndian>(as_u32(set.steps + 1, "row count")?)?;
    w.write_u32::<LittleEndian>(as_u32(set.embedding_dim, "embedding dim")?)?;
    w.write_u32::<LittleEndian>(u32::from(set.labels_present))?;
    let mut meta_block = String::new();
    for (k, v) in &set.meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(fmt(format!(
                "metadata key/value {k:?} contains '=' or newline"
            )));
        }
        meta_block.push_str(k);
        meta_block.push('=');
        meta_block.push_str(v);
        meta_block.push('\n');
    }
    w.write_u32::<LittleEndian>(as_u32(meta_block.len(), "metadata length")?)?;
    w.write_all(meta_block.as_bytes())?;
    for t in &set.trajectories {
        if set.labels_present {
            w.write_i32::<LittleEndian>(t.label)?;
        }
        for &p in t.raw() {
            w.write_f32::<LittleEndian>(p as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<TrajectorySet> {
    let fmt = |d: &str| Error::format(path.display().to_string(), d.to_string());
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fmt("truncated before magic"))?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(fmt("bad magic, not a trajectory file"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| fmt("truncated header"))?;
    if version != TRAJECTORY_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported trajectory version {version}"),
        ));
    }
    let mut read_u32 = |what: &str| -> Result<u32> {
        r.read_u32::<LittleEndian>()
            .map_err(|_| Error::format(path.display().to_string(), format!("truncated at {what}")))
    };
    let n = read_u32("trajectory count")? as usize;
    let rows = read_u32("row count")? as usize;
    let dim = read_u32("embedding dim")? as usize;
    let labels_flag = read_u32("labels flag")?;
    if labels_flag > 1 {
        return Err(fmt("labels flag must be 0 or 1"));
    }
    let labels_present = labels_flag == 1;
    if rows == 0 || dim == 0 {
        return Err(fmt("row count and embedding dim must be positive"));
    }
    let meta_len = read_u32("metadata length")? as usize;
    let total = (n as u64)
        .checked_mul(rows as u64)
        .and_then(|v| v.checked_mul(dim as u64))
        .filter(|&v| v <= (u32::MAX as u64) * 1024)
        .ok_or_else(|| fmt("trajectory sizes overflow"))?;
    let _ = total;

    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)
        .map_err(|_| fmt("truncated metadata block"))?;
    let meta_str = String::from_utf8(meta_bytes).map_err(|_| fmt("metadata block is not UTF-8"))?;
    let mut meta = BTreeMap::new();
    for line in meta_str.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt("metadata line without '='"))?;
        meta.insert(k.to_string(), v.to_string());
    }

    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let label = if labels_present {
            r.read_i32::<LittleEndian>()
                .map_err(|_| fmt("truncated at trajectory label"))?
        } else {
            -1
        };
        let mut points = Vec::with_capacity(rows * dim);
        for _ in 0..rows * dim {
            points.push(f64::from(
                r.read_f32::<LittleEndian>()
                    .map_err(|_| fmt("truncated trajectory points"))?,
            ));
        }
        trajectories.push(Trajectory::new(i, label, points, dim)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(fmt("trailing bytes after trajectories"));
    }
    Ok(TrajectorySet {
        trajectories,
        embedding_dim: dim,
        steps: rows - 1,
        labels_present,
        meta,
    })
}
