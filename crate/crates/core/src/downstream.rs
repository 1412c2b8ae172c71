//! Transfer evaluation and score/performance correlation: 1-NN accuracy
//! of frozen embeddings on held-out tasks, per-task min-max accuracy
//! normalization over an encoder cohort, Pearson correlation, and the
//! joined report tying rmqm to downstream performance.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::encoders::{self, Model};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Shuffle and split a dataset. Both sides must come out nonempty.
pub fn split_dataset(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    data.validate()?;
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must be in [0,1], got {train_fraction}"
        )));
    }
    let n = data.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "split {train_fraction} of {n} samples leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::DOMAIN_SPLIT]));
    let take = |idx: &[usize], split: Split| -> Result<Dataset> {
        Ok(Dataset {
            inputs: data.inputs.gather_rows(idx)?,
            labels: idx.iter().map(|&i| data.labels[i]).collect(),
            split,
        })
    };
    Ok((
        take(&order[..n_train], Split::Train)?,
        take(&order[n_train..], Split::Test)?,
    ))
}

/// Fraction of query points whose single nearest reference point (squared
/// Euclidean, ties to the lowest reference index) carries the same label.
pub fn knn1_accuracy(
    reference: &Tensor,
    reference_labels: &[usize],
    queries: &Tensor,
    query_labels: &[usize],
) -> Result<f64> {
    if reference.rank() != 2 || queries.rank() != 2 {
        return Err(Error::shape(
            "knn1_accuracy",
            "embeddings must be matrices".to_string(),
        ));
    }
    if reference.ncols() != queries.ncols() {
        return Err(Error::shape(
            "knn1_accuracy",
            format!(
                "reference dim {} vs query dim {}",
                reference.ncols(),
                queries.ncols()
            ),
        ));
    }
    if reference.nrows() == 0 || reference.nrows() != reference_labels.len() {
        return Err(Error::InvalidArgument(format!(
            "reference set has {} rows and {} labels",
            reference.nrows(),
            reference_labels.len()
        )));
    }
    if queries.nrows() == 0 || queries.nrows() != query_labels.len() {
        return Err(Error::InvalidArgument(format!(
            "query set has {} rows and {} labels",
            queries.nrows(),
            query_labels.len()
        )));
    }
    let correct: usize = (0..queries.nrows())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let mut best = 0usize;
            let mut best_sq = f64::INFINITY;
            for ri in 0..reference.nrows() {
                let sq: f64 = reference
                    .row(ri)
                    .iter()
                    .zip(q)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if sq < best_sq {
                    best_sq = sq;
                    best = ri;
                }
            }
            usize::from(reference_labels[best] == query_labels[qi])
        })
        .sum();
    Ok(correct as f64 / queries.nrows() as f64)
}

/// Per-task min-max normalization over a cohort of accuracies. A cohort
/// with no spread maps everything to 1.0.
pub fn normalize_accuracy(accuracies: &[f64]) -> Result<Vec<f64>> {
    if accuracies.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cohort too small: normalization needs at least 2 accuracies, got {}",
            accuracies.len()
        )));
    }
    let min = accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::NonFinite("accuracy cohort".into()));
    }
    if max == min {
        return Ok(vec![1.0; accuracies.len()]);
    }
    Ok(accuracies.iter().map(|a| (a - min) / (max - min)).collect())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs two equal-length series of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "undefined correlation: a series has zero variance".into(),
        ));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Encode both splits with a frozen model and score 1-NN transfer.
pub fn encoder_transfer_accuracy(
    model: &Model,
    reference: &Dataset,
    queries: &Dataset,
) -> Result<f64> {
    let ref_embeds = encoders::encode(&model.params, &model.spec, &reference.inputs)?;
    let query_embeds = encoders::encode(&model.params, &model.spec, &queries.inputs)?;
    knn1_accuracy(
        &ref_embeds,
        &reference.labels,
        &query_embeds,
        &queries.labels,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub encoder_id: String,
    pub task_id: String,
    pub raw_accuracy: f64,
    /// Filled in during report assembly, within the compared cohort.
    pub normalized_accuracy: Option<f64>,
}

/// One encoder's identity and headline score, as joined into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSummary {
    pub encoder_id: String,
    pub method: String,
    pub embedding_dim: usize,
    pub optimizer: String,
    pub rmqm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub encoder_id: String,
    pub method: String,
    pub embedding_dim: usize,
    pub optimizer: String,
    pub rmqm: f64,
    pub task_id: String,
    pub raw_accuracy: f64,
    pub normalized_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub rows: Vec<ReportRow>,
    /// Pearson r over encoder x task pairs: rmqm vs normalized accuracy.
    pub r_rmqm_performance: Option<f64>,
    pub r_dim_performance: Option<f64>,
    /// Over unique encoders.
    pub r_dim_rmqm: Option<f64>,
    pub warnings: Vec<String>,
}

/// Join encoder scores with eval results, normalize accuracies per task,
/// and compute the three summary correlations. Unmatched ids become
/// warnings; fewer than two matched encoders is an error.
pub fn build_report(
    encoders: &[EncoderSummary],
    evals: &[EvalResult],
) -> Result<CorrelationReport> {
    let mut by_id: BTreeMap<&str, &EncoderSummary> = BTreeMap::new();
    for e in encoders {
        if by_id.insert(e.encoder_id.as_str(), e).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate encoder id {:?}",
                e.encoder_id
            )));
        }
    }
    let mut warnings = Vec::new();
    let mut by_task: BTreeMap<&str, Vec<&EvalResult>> = BTreeMap::new();
    for ev in evals {
        if by_id.contains_key(ev.encoder_id.as_str()) {
            by_task.entry(ev.task_id.as_str()).or_default().push(ev);
        } else {
            warnings.push(format!(
                "eval for unknown encoder {:?} on task {:?} ignored",
                ev.encoder_id, ev.task_id
            ));
        }
    }
    let evaluated: BTreeSet<&str> = evals.iter().map(|e| e.encoder_id.as_str()).collect();
    for e in encoders {
        if !evaluated.contains(e.encoder_id.as_str()) {
            warnings.push(format!(
                "encoder {:?} has no eval results and is excluded",
                e.encoder_id
            ));
        }
    }

    let mut rows = Vec::new();
    for (task, task_evals) in &by_task {
        if task_evals.len() < 2 {
            warnings.push(format!(
                "task {task:?} has fewer than 2 evaluated encoders and is excluded"
            ));
            continue;
        }
        let raw: Vec<f64> = task_evals.iter().map(|e| e.raw_accuracy).collect();
        let normalized = normalize_accuracy(&raw)?;
        for (ev, norm) in task_evals.iter().zip(normalized) {
            let enc = by_id[ev.encoder_id.as_str()];
            rows.push(ReportRow {
                encoder_id: enc.encoder_id.clone(),
                method: enc.method.clone(),
                embedding_dim: enc.embedding_dim,
                optimizer: enc.optimizer.clone(),
                rmqm: enc.rmqm,
                task_id: task.to_string(),
                raw_accuracy: ev.raw_accuracy,
                normalized_accuracy: norm,
            });
        }
    }
    let matched: BTreeSet<&str> = rows.iter().map(|r| r.encoder_id.as_str()).collect();
    if matched.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cohort too small: report needs at least 2 encoders with scores and evals, got {}",
            matched.len()
        )));
    }

    let mut correlate = |x: Vec<f64>, y: Vec<f64>, what: &str| match pearson(&x, &y) {
        Ok(r) => Some(r),
        Err(Error::Degenerate(_)) => {
            warnings.push(format!("correlation {what} undefined: zero variance"));
            None
        }
        Err(_) => None,
    };
    let rmqms: Vec<f64> = rows.iter().map(|r| r.rmqm).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.normalized_accuracy).collect();
    let dims: Vec<f64> = rows.iter().map(|r| r.embedding_dim as f64).collect();
    let r_rmqm_performance = correlate(rmqms, norms.clone(), "rmqm/performance");
    let r_dim_performance = correlate(dims, norms, "dim/performance");
    let unique: Vec<&EncoderSummary> = matched.iter().map(|id| by_id[id]).collect();
    let r_dim_rmqm = correlate(
        unique.iter().map(|e| e.embedding_dim as f64).collect(),
        unique.iter().map(|e| e.rmqm).collect(),
        "dim/rmqm",
    );
    Ok(CorrelationReport {
        rows,
        r_rmqm_performance,
        r_dim_performance,
        r_dim_rmqm,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_blobs;
    use rand::Rng;

    #[test]
    fn nearest_reference_decides_the_label() {
        let reference = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let queries = Tensor::matrix(1, 2, vec![0.1, 0.0]).unwrap();
        let acc = knn1_accuracy(&reference, &[0, 1], &queries, &[0]).unwrap();
        assert_eq!(acc, 1.0);
        let acc = knn1_accuracy(&reference, &[0, 1], &queries, &[1]).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn querying_the_reference_set_is_perfect() {
        let data = gen_blobs(10, 3, 4, 0.08, 3).unwrap();
        let acc = knn1_accuracy(&data.inputs, &data.labels, &data.inputs, &data.labels).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn ties_go_to_the_lowest_reference_index() {
        // two reference points equidistant from the query
        let reference = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        let queries = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert_eq!(
            knn1_accuracy(&reference, &[7, 8], &queries, &[7]).unwrap(),
            1.0
        );
        assert_eq!(
            knn1_accuracy(&reference, &[7, 8], &queries, &[8]).unwrap(),
            0.0
        );
    }

    #[test]
    fn knn_matches_a_looped_oracle_exactly() {
        let mut rng = crate::rng::stream(17, &[80]);
        let n = 120;
        let m = 80;
        let dim = 5;
        let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng, rows: usize| {
            let data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::matrix(rows, dim, data).unwrap()
        };
        let reference = rand_mat(&mut rng, n);
        let queries = rand_mat(&mut rng, m);
        let ref_labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let query_labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..3)).collect();

        let mut correct = 0usize;
        for (qi, q_label) in query_labels.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for ri in 0..n {
                let mut d = 0.0;
                for k in 0..dim {
                    let diff = reference.row(ri)[k] - queries.row(qi)[k];
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = ri;
                }
            }
            if ref_labels[best] == *q_label {
                correct += 1;
            }
        }
        let expected = correct as f64 / m as f64;
        let got = knn1_accuracy(&reference, &ref_labels, &queries, &query_labels).unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn knn_rejects_bad_shapes() {
        let reference = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let queries = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(knn1_accuracy(&reference, &[0, 1], &queries, &[0]).is_err());
        let empty = Tensor::matrix(0, 2, vec![]).unwrap();
        let q = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(knn1_accuracy(&empty, &[], &q, &[0]).is_err());
    }

    #[test]
    fn knn_is_invariant_under_a_shared_rotation() {
        let mut rng = crate::rng::stream(5, &[81]);
        let dim = 4;
        let data = gen_blobs(20, 3, dim, 0.12, 9).unwrap();
        let (train, test) = split_dataset(&data, 0.8, 2).unwrap();
        let base = knn1_accuracy(&train.inputs, &train.labels, &test.inputs, &test.labels).unwrap();
        // random rotation built by Gram-Schmidt
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for vi in &mut v {
                    *vi /= norm;
                }
                basis.push(v);
            }
        }
        let rotate = |t: &Tensor| {
            let mut out = Vec::with_capacity(t.len());
            for r in 0..t.nrows() {
                for row in &basis {
                    out.push(row.iter().zip(t.row(r)).map(|(a, b)| a * b).sum());
                }
            }
            Tensor::matrix(t.nrows(), dim, out).unwrap()
        };
        let rotated = knn1_accuracy(
            &rotate(&train.inputs),
            &train.labels,
            &rotate(&test.inputs),
            &test.labels,
        )
        .unwrap();
        assert_eq!(base, rotated);
    }

    #[test]
    fn normalization_hits_the_endpoints() {
        assert_eq!(normalize_accuracy(&[0.2, 0.6]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(normalize_accuracy(&[0.5, 0.5]).unwrap(), vec![1.0, 1.0]);
        let three = normalize_accuracy(&[0.2, 0.4, 0.6]).unwrap();
        assert!((three[0] - 0.0).abs() < 1e-12);
        assert!((three[1] - 0.5).abs() < 1e-12);
        assert!((three[2] - 1.0).abs() < 1e-12);
        assert!(normalize_accuracy(&[0.7]).is_err());
    }

    #[test]
    fn normalization_preserves_ranking() {
        let mut rng = crate::rng::stream(11, &[82]);
        let raw: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let norm = normalize_accuracy(&raw).unwrap();
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                assert_eq!(raw[i] < raw[j], norm[i] < norm[j]);
            }
        }
    }

    #[test]
    fn pearson_matches_hand_values() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_is_affine_invariant_and_sign_flips() {
        let mut rng = crate::rng::stream(13, &[83]);
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = pearson(&x, &y).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| 3.5 * v + 0.7).collect();
        assert!((pearson(&scaled, &y).unwrap() - base).abs() < 1e-12);
        let negated: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((pearson(&x, &negated).unwrap() + base).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn split_shuffles_and_partitions() {
        let data = gen_blobs(25, 2, 3, 0.05, 21).unwrap();
        let (train, test) = split_dataset(&data, 0.8, 4).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 10);
        assert_eq!(train.split, Split::Train);
        assert_eq!(test.split, Split::Test);
        let again = split_dataset(&data, 0.8, 4).unwrap();
        assert_eq!(train.labels, again.0.labels);
        // every original row lands on exactly one side
        let mut seen = std::collections::BTreeSet::new();
        for d in [&train, &test] {
            for r in 0..d.len() {
                let key: Vec<u64> = d.inputs.row(r).iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(key));
            }
        }
        assert_eq!(seen.len(), 50);
        assert!(split_dataset(&data, 0.0, 4).is_err());
        assert!(split_dataset(&data, 1.0, 4).is_err());
    }

    fn summary(id: &str, dim: usize, rmqm: f64) -> EncoderSummary {
        EncoderSummary {
            encoder_id: id.to_string(),
            method: "nt-xent".to_string(),
            embedding_dim: dim,
            optimizer: "adam".to_string(),
            rmqm,
        }
    }

    fn eval(id: &str, task: &str, acc: f64) -> EvalResult {
        EvalResult {
            encoder_id: id.to_string(),
            task_id: task.to_string(),
            raw_accuracy: acc,
            normalized_accuracy: None,
        }
    }

    #[test]
    fn two_encoder_report_correlates_perfectly() {
        let encoders = [summary("a", 16, 1.0), summary("b", 32, 2.0)];
        let evals = [eval("a", "rings", 0.4), eval("b", "rings", 0.9)];
        let report = build_report(&encoders, &evals).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!((report.r_rmqm_performance.unwrap() - 1.0).abs() < 1e-12);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn unmatched_ids_become_warnings() {
        let encoders = [
            summary("a", 16, 1.0),
            summary("b", 32, 2.0),
            summary("c", 64, 3.0),
        ];
        let evals = [
            eval("a", "rings", 0.4),
            eval("b", "rings", 0.9),
            eval("ghost", "rings", 0.5),
        ];
        let report = build_report(&encoders, &evals).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.warnings.iter().any(|w| w.contains("ghost")));
        assert!(report.warnings.iter().any(|w| w.contains("\"c\"")));
    }

    #[test]
    fn single_encoder_cohort_is_an_error() {
        let encoders = [summary("a", 16, 1.0)];
        let evals = [eval("a", "rings", 0.4)];
        let err = build_report(&encoders, &evals).unwrap_err();
        assert!(err.to_string().contains("cohort too small"), "{err}");
    }

    #[test]
    fn zero_variance_correlations_are_reported_as_undefined() {
        // same dim everywhere: dim correlations are undefined, rmqm one is not
        let encoders = [summary("a", 16, 1.0), summary("b", 16, 2.0)];
        let evals = [eval("a", "rings", 0.4), eval("b", "rings", 0.9)];
        let report = build_report(&encoders, &evals).unwrap();
        assert!(report.r_rmqm_performance.is_some());
        assert_eq!(report.r_dim_performance, None);
        assert_eq!(report.r_dim_rmqm, None);
        assert!(report.warnings.iter().any(|w| w.contains("undefined")));
    }

    #[test]
    fn identity_encoder_transfers_blob_structure() {
        let data = gen_blobs(30, 4, 5, 0.05, 31).unwrap();
        let (train, test) = split_dataset(&data, 0.8, 6).unwrap();
        let eye = {
            let mut v = vec![0.0; 25];
            for k in 0..5 {
                v[k * 5 + k] = 1.0;
            }
            Tensor::matrix(5, 5, v).unwrap()
        };
        let spec = crate::encoders::EncoderSpec {
            input_dim: 5,
            hidden_layers: vec![],
            embedding_dim: 5,
            num_classes: None,
        };
        let model = Model {
            spec,
            params: crate::encoders::EncoderParams {
                layers: vec![crate::encoders::Layer {
                    weight: eye,
                    bias: Tensor::zeros(&[5]),
                }],
                head: None,
            },
        };
        let acc = encoder_transfer_accuracy(&model, &train, &test).unwrap();
        assert!(acc > 0.99, "accuracy {acc}");
    }
}
