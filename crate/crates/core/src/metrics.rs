//! Manifold characteristics of a trajectory set: how far representations
//! move under growing alterations (D), how unevenly they move relative to
//! the origin (D_RC) and relative to the previous step (P_RC), and the
//! combined quality score RMQM. All distances are dimension-normalized so
//! encoders of different widths are comparable.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectories::{Trajectory, TrajectorySet};

/// Relative-change terms whose denominator falls below this are skipped
/// and counted instead of poisoning the mean.
pub const DENOMINATOR_GUARD: f64 = 1e-12;
/// Cap on the inverse terms inside the rmqm logarithm.
pub const INVERSE_CAP: f64 = 1e6;

/// Euclidean distance divided by sqrt(dim).
pub fn norm_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            "norm_distance",
            format!("dims {} vs {}", a.len(), b.len()),
        ));
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq.sqrt() / (a.len() as f64).sqrt())
}

/// Mean distance from the original representation over all altered steps.
pub fn distance_moved(traj: &Trajectory) -> Result<f64> {
    let j_total = traj.rows() - 1;
    if j_total == 0 {
        return Err(Error::InvalidArgument(
            "distance_moved needs at least one alteration step".into(),
        ));
    }
    let origin = traj.point(0);
    let mut acc = 0.0;
    for j in 1..=j_total {
        acc += norm_distance(origin, traj.point(j))?;
    }
    Ok(acc / j_total as f64)
}

/// A metric value together with the number of guarded (skipped) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardedValue {
    pub value: f64,
    pub guarded_terms: usize,
}

/// Mean relative change of the distance to the original representation:
/// (1/J) sum over j of |(d_j - d_{j-1}) / d_j| with d_j = d(p_0, p_j).
pub fn relative_change_origin(traj: &Trajectory) -> Result<GuardedValue> {
    let j_total = traj.rows() - 1;
    if j_total == 0 {
        return Err(Error::InvalidArgument(
            "relative_change_origin needs at least one alteration step".into(),
        ));
    }
    let origin = traj.point(0);
    let mut acc = 0.0;
    let mut guarded = 0usize;
    let mut prev = 0.0;
    for j in 1..=j_total {
        let cur = norm_distance(origin, traj.point(j))?;
        if cur < DENOMINATOR_GUARD {
            guarded += 1;
        } else {
            acc += ((cur - prev) / cur).abs();
        }
        prev = cur;
    }
    if guarded == j_total {
        return Err(Error::Degenerate(
            "degenerate trajectory: every distance to the origin is below the guard".into(),
        ));
    }
    Ok(GuardedValue {
        value: acc / j_total as f64,
        guarded_terms: guarded,
    })
}

/// Which count divides the previous-step relative-change sum. The sum has
/// J-1 terms; the default divides by J anyway, matching the definition
/// this tool is built around. TermCount divides by J-1 instead.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepPrefactor {
    #[default]
    StepCount,
    TermCount,
}

/// Mean relative change of the step size s_j = d(p_{j-1}, p_j):
/// prefactor * sum over j>=2 of |(s_j - s_{j-1}) / s_j|.
pub fn relative_change_previous(traj: &Trajectory) -> Result<GuardedValue> {
    relative_change_previous_with(traj, StepPrefactor::StepCount)
}

pub fn relative_change_previous_with(
    traj: &Trajectory,
    prefactor: StepPrefactor,
) -> Result<GuardedValue> {
    let j_total = traj.rows() - 1;
    if j_total < 2 {
        return Err(Error::InvalidArgument(
            "relative_change_previous needs at least two alteration steps".into(),
        ));
    }
    let mut steps = Vec::with_capacity(j_total);
    for j in 1..=j_total {
        steps.push(norm_distance(traj.point(j - 1), traj.point(j))?);
    }
    let mut acc = 0.0;
    let mut guarded = 0usize;
    for j in 1..j_total {
        let cur = steps[j];
        if cur < DENOMINATOR_GUARD {
            guarded += 1;
        } else {
            acc += ((cur - steps[j - 1]) / cur).abs();
        }
    }
    if guarded == j_total - 1 {
        return Err(Error::Degenerate(
            "degenerate trajectory: every step size is below the guard".into(),
        ));
    }
    let denom = match prefactor {
        StepPrefactor::StepCount => j_total as f64,
        StepPrefactor::TermCount => (j_total - 1) as f64,
    };
    Ok(GuardedValue {
        value: acc / denom,
        guarded_terms: guarded,
    })
}

/// ln(1 + D + 1/D_RC + 1/P_RC), with each inverse capped at
/// [`INVERSE_CAP`] so zero denominators stay finite.
pub fn rmqm(d: f64, d_rc: f64, p_rc: f64) -> Result<f64> {
    for (name, v) in [("d", d), ("d_rc", d_rc), ("p_rc", p_rc)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("rmqm input {name}")));
        }
        if v < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "rmqm input {name} must be nonnegative, got {v}"
            )));
        }
    }
    let inv = |v: f64| {
        if v <= 0.0 {
            INVERSE_CAP
        } else {
            (1.0 / v).min(INVERSE_CAP)
        }
    };
    Ok((1.0 + d + inv(d_rc) + inv(p_rc)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// std / sqrt(n).
    pub se: f64,
}

pub fn aggregate(values: &[f64]) -> Result<AggregateStats> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("aggregate of no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(AggregateStats {
        n: values.len(),
        mean,
        std,
        se: std / n.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_index: usize,
    pub label: i32,
    pub d: f64,
    /// None when the trajectory was degenerate for this metric.
    pub d_rc: Option<f64>,
    pub p_rc: Option<f64>,
    /// Present only when both relative-change metrics are.
    pub rmqm: Option<f64>,
    pub guarded_d_rc: usize,
    pub guarded_p_rc: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub meta: BTreeMap<String, String>,
    pub samples: usize,
    pub steps: usize,
    pub embedding_dim: usize,
    pub d: AggregateStats,
    pub d_rc: AggregateStats,
    pub p_rc: AggregateStats,
    /// Spread of the per-sample rmqm values; None when no sample had both
    /// relative-change metrics defined.
    pub rmqm_samples: Option<AggregateStats>,
    /// Headline score: rmqm of the cohort means.
    pub rmqm: f64,
    pub guarded_d_rc_terms: usize,
    pub guarded_p_rc_terms: usize,
    /// Trajectories dropped from the d_rc / p_rc means as degenerate.
    pub excluded_d_rc: usize,
    pub excluded_p_rc: usize,
    pub per_sample: Vec<SampleMetrics>,
}

/// Score a whole trajectory set. Degenerate trajectories are excluded from
/// the relative-change means (and counted); the set errors only when every
/// trajectory is degenerate or the plan had fewer than two steps.
pub fn measure_set(set: &TrajectorySet) -> Result<MetricsRecord> {
    measure_set_with(set, StepPrefactor::StepCount)
}

pub fn measure_set_with(set: &TrajectorySet, prefactor: StepPrefactor) -> Result<MetricsRecord> {
    set.validate()?;
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory set".into()));
    }
    if set.steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 alteration steps to score a set, got {}",
            set.steps
        )));
    }
    let per_sample: Result<Vec<SampleMetrics>> = set
        .trajectories
        .par_iter()
        .map(|t| sample_metrics(t, prefactor))
        .collect();
    let per_sample = per_sample?;

    let d_values: Vec<f64> = per_sample.iter().map(|s| s.d).collect();
    let d_rc_values: Vec<f64> = per_sample.iter().filter_map(|s| s.d_rc).collect();
    let p_rc_values: Vec<f64> = per_sample.iter().filter_map(|s| s.p_rc).collect();
    if d_rc_values.is_empty() || p_rc_values.is_empty() {
        return Err(Error::Degenerate(
            "every trajectory in the set is degenerate".into(),
        ));
    }
    let rmqm_values: Vec<f64> = per_sample.iter().filter_map(|s| s.rmqm).collect();

    let d = aggregate(&d_values)?;
    let d_rc = aggregate(&d_rc_values)?;
    let p_rc = aggregate(&p_rc_values)?;
    let score = rmqm(d.mean, d_rc.mean, p_rc.mean)?;
    Ok(MetricsRecord {
        meta: set.meta.clone(),
        samples: set.len(),
        steps: set.steps,
        embedding_dim: set.embedding_dim,
        d,
        d_rc,
        p_rc,
        rmqm_samples: if rmqm_values.is_empty() {
            None
        } else {
            Some(aggregate(&rmqm_values)?)
        },
        rmqm: score,
        guarded_d_rc_terms: per_sample.iter().map(|s| s.guarded_d_rc).sum(),
        guarded_p_rc_terms: per_sample.iter().map(|s| s.guarded_p_rc).sum(),
        excluded_d_rc: per_sample.iter().filter(|s| s.d_rc.is_none()).count(),
        excluded_p_rc: per_sample.iter().filter(|s| s.p_rc.is_none()).count(),
        per_sample,
    })
}

fn sample_metrics(t: &Trajectory, prefactor: StepPrefactor) -> Result<SampleMetrics> {
    let d = distance_moved(t)?;
    let split_degenerate = |r: Result<GuardedValue>, term_count: usize| match r {
        Ok(g) => Ok((Some(g.value), g.guarded_terms)),
        Err(Error::Degenerate(_)) => Ok((None, term_count)),
        Err(e) => Err(e),
    };
    let j_total = t.rows() - 1;
    let (d_rc, guarded_d_rc) = split_degenerate(relative_change_origin(t), j_total)?;
    let (p_rc, guarded_p_rc) =
        split_degenerate(relative_change_previous_with(t, prefactor), j_total - 1)?;
    let score = match (d_rc, p_rc) {
        (Some(a), Some(b)) => Some(rmqm(d, a, b)?),
        _ => None,
    };
    Ok(SampleMetrics {
        sample_index: t.sample_index,
        label: t.label,
        d,
        d_rc,
        p_rc,
        rmqm: score,
        guarded_d_rc,
        guarded_p_rc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub se: f64,
}

/// Per-step mean distance from the origin over the whole set, step 0
/// included (always 0).
pub fn distance_series(set: &TrajectorySet) -> Result<Vec<SeriesPoint>> {
    set.validate()?;
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory set".into()));
    }
    let mut out = Vec::with_capacity(set.steps + 1);
    for j in 0..=set.steps {
        let values: Result<Vec<f64>> = set
            .trajectories
            .iter()
            .map(|t| norm_distance(t.point(0), t.point(j)))
            .collect();
        let stats = aggregate(&values?)?;
        out.push(SeriesPoint {
            step: j,
            n: stats.n,
            mean: stats.mean,
            std: stats.std,
            se: stats.se,
        });
    }
    Ok(out)
}

/// Per-step mean of |(d_j - d_{j-1}) / d_j| over the set, skipping guarded
/// samples at each step. Steps where every sample is guarded are omitted.
pub fn relative_change_series(set: &TrajectorySet) -> Result<Vec<SeriesPoint>> {
    set.validate()?;
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory set".into()));
    }
    let mut out = Vec::new();
    for j in 1..=set.steps {
        let mut values = Vec::with_capacity(set.len());
        for t in &set.trajectories {
            let prev = if j == 1 {
                0.0
            } else {
                norm_distance(t.point(0), t.point(j - 1))?
            };
            let cur = norm_distance(t.point(0), t.point(j))?;
            if cur >= DENOMINATOR_GUARD {
                values.push(((cur - prev) / cur).abs());
            }
        }
        if values.is_empty() {
            continue;
        }
        let stats = aggregate(&values)?;
        out.push(SeriesPoint {
            step: j,
            n: stats.n,
            mean: stats.mean,
            std: stats.std,
            se: stats.se,
        });
    }
    Ok(out)
}
