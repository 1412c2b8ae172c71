//! Input alteration sequences: the growing white-noise schedule and the
//! iterated gradient-sign walk. Both produce, for one sample, the chain
//! x_0 (unaltered), x_1, ..., x_J with every component clipped to [0,1].
//!
//! Noise sequences depend only on (master_seed, sample_index, step), never
//! on the encoder, so every encoder under comparison sees byte-identical
//! altered inputs. The gradient walk is encoder-specific by nature: each
//! step moves by epsilon times the sign of the input gradient of the
//! encoder's own training objective, with sign(0) = 0.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bindings, ExprGraph, GraphBuilder};
use crate::datagen::Dataset;
use crate::encoders::{self, Model};
use crate::error::{Error, Result};
use crate::losses;
use crate::rng;
use crate::tensor::Tensor;
use crate::training::Method;

pub const DEFAULT_NOISE_STEPS: usize = 100;
pub const DEFAULT_PGD_ITERATIONS: usize = 30;
pub const DEFAULT_EPSILON_FGSM: f64 = 2.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlterationKind {
    Noise,
    Pgd,
}

impl AlterationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AlterationKind::Noise => "noise",
            AlterationKind::Pgd => "pgd",
        }
    }

    pub fn parse(s: &str) -> Result<AlterationKind> {
        match s {
            "noise" => Ok(AlterationKind::Noise),
            "pgd" => Ok(AlterationKind::Pgd),
            other => Err(Error::InvalidArgument(format!(
                "unknown alteration kind {other:?}, expected noise or pgd"
            ))),
        }
    }
}

impl std::fmt::Display for AlterationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AlterationPlan {
    pub kind: AlterationKind,
    /// Number of altered steps J; the sequence has J+1 entries. J = 0 is
    /// the degenerate plan that keeps only the original input.
    pub steps: usize,
    /// Per-iteration step size of the gradient walk (unused for noise).
    pub epsilon_fgsm: f64,
    pub master_seed: u64,
}

impl AlterationPlan {
    pub fn noise(steps: usize, master_seed: u64) -> Self {
        AlterationPlan {
            kind: AlterationKind::Noise,
            steps,
            epsilon_fgsm: DEFAULT_EPSILON_FGSM,
            master_seed,
        }
    }

    pub fn pgd(iterations: usize, epsilon_fgsm: f64, master_seed: u64) -> Self {
        AlterationPlan {
            kind: AlterationKind::Pgd,
            steps: iterations,
            epsilon_fgsm,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AlterationKind::Pgd && self.epsilon_fgsm <= 0.0 {
            return Err(Error::InvalidArgument(
                "epsilon_fgsm must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AlteredSequence {
    pub sample_index: usize,
    /// J+1 input vectors, element 0 the unaltered sample.
    pub inputs: Vec<Tensor>,
}

fn check_unit_range(x: &Tensor) -> Result<()> {
    if x.rank() != 1 {
        return Err(Error::shape(
            "alteration input",
            format!("expected a vector, got shape {:?}", x.shape()),
        ));
    }
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidData(format!(
            "input component {v} outside [0,1]"
        )));
    }
    Ok(())
}

/// Step j draws additive noise from N(0, (j/J)^2) on a stream seeded by
/// (master_seed, sample_index, j), then clips. Draws at different steps
/// are independent, and no model is consulted.
pub fn white_noise_sequence(
    x: &Tensor,
    plan: &AlterationPlan,
    sample_index: usize,
) -> Result<AlteredSequence> {
    plan.validate()?;
    check_unit_range(x)?;
    let j_total = plan.steps;
    let mut inputs = Vec::with_capacity(j_total + 1);
    inputs.push(x.clone());
    for j in 1..=j_total {
        let eps = j as f64 / j_total as f64;
        let mut stream = rng::stream(
            plan.master_seed,
            &[rng::DOMAIN_NOISE, sample_index as u64, j as u64],
        );
        let data = x
            .data()
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut stream);
                (v + eps * z).clamp(0.0, 1.0)
            })
            .collect();
        inputs.push(Tensor::from_parts(vec![x.len()], data));
    }
    Ok(AlteredSequence {
        sample_index,
        inputs,
    })
}

/// Fixed side information for the gradient walk, chosen per method and
/// held constant over all iterations.
#[derive(Debug, Clone)]
pub enum PgdAux {
    /// True class, for objectives with a cross-entropy term.
    Label(usize),
    /// Input vectors of a mined (positive, negative) pair; the walk
    /// differentiates with respect to the anchor only.
    Pair { positive: Tensor, negative: Tensor },
    /// Augmented view input; the walk differentiates with respect to the
    /// unaugmented sample.
    View(Tensor),
}

fn as_row(x: &Tensor) -> Tensor {
    Tensor::from_parts(vec![1, x.len()], x.data().to_vec())
}

/// Loss graph for one walk, with "x" the only rebindable variable; model
/// parameters and aux-derived embeddings enter as fixed bindings and
/// constants.
fn walk_graph(model: &Model, method: Method, aux: &PgdAux) -> Result<(ExprGraph, Bindings)> {
    let spec = &model.spec;
    let mut g = GraphBuilder::new();
    let mut bindings = Bindings::new();
    encoders::bind_params(&mut bindings, &model.params);

    let loss = match (method, aux) {
        (Method::CrossEntropy | Method::TripletEntropy, PgdAux::Label(y)) => {
            // the triplet-entropy walk follows its cross-entropy term; the
            // triplet term has no per-sample pair in this aux
            let x = g.var("x");
            let e = encoders::encode_node(&mut g, spec, x);
            let z = encoders::head_node(&mut g, spec, e)?;
            let c = spec.num_classes.expect("head implies classes");
            if *y >= c {
                return Err(Error::InvalidData(format!(
                    "label {y} out of range for {c} classes"
                )));
            }
            losses::ce_node(&mut g, z, &[*y], c)
        }
        (
            Method::TripletSupervised | Method::TripletSelfSup,
            PgdAux::Pair { positive, negative },
        ) => {
            let ep = encoders::encode(&model.params, spec, &as_row(positive))?;
            let en = encoders::encode(&model.params, spec, &as_row(negative))?;
            let x = g.var("x");
            let ea = encoders::encode_node(&mut g, spec, x);
            let p = g.constant(ep);
            let n = g.constant(en);
            losses::triplet_node(&mut g, ea, p, n, 1.0)
        }
        (Method::NtXent, PgdAux::View(view)) => {
            let ev = encoders::encode(&model.params, spec, &as_row(view))?;
            let norm: f64 = ev.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(
                    "view embedding has zero norm, normalization undefined".into(),
                ));
            }
            let unit_view = Tensor::from_parts(
                ev.shape().to_vec(),
                ev.data().iter().map(|v| v / norm).collect(),
            );
            // self-inclusive two-member pool: the anchor's self-similarity
            // is exactly 1 after normalization, so the objective is
            // -s/tau + ln(exp(1/tau) + exp(s/tau)), a strictly decreasing
            // function of the anchor-view cosine s; its gradient sign
            // matches any NT-XENT-style pull away from the view
            let tau = 0.5;
            let x = g.var("x");
            let e = encoders::encode_node(&mut g, spec, x);
            let sq = g.mul(e, e);
            let row_sq = g.row_sum(sq);
            let log_sq = g.log(row_sq);
            let neg_half = g.scale(log_sq, -0.5);
            let inv_norm = g.exp(neg_half);
            let unit = g.scale_rows(e, inv_norm);
            // the unit view as a column, so the matmul yields the cosine
            let vt = g.constant(Tensor::from_parts(
                vec![unit_view.len(), 1],
                unit_view.data().to_vec(),
            ));
            let s = g.matmul(unit, vt);
            let b = g.scale(s, 1.0 / tau);
            let eb = g.exp(b);
            let denom = g.add_scalar(eb, (1.0 / tau).exp());
            let log_denom = g.log(denom);
            let neg = g.sub(log_denom, b);
            g.sum(neg)
        }
        (m, a) => {
            return Err(Error::InvalidArgument(format!(
                "aux {} does not fit method {m}",
                match a {
                    PgdAux::Label(_) => "label",
                    PgdAux::Pair { .. } => "pair",
                    PgdAux::View(_) => "view",
                }
            )));
        }
    };
    Ok((g.finish(loss), bindings))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Iterated gradient-sign walk: x_j = clip01(x_{j-1} + eps * sign(grad)),
/// ascending the method's own loss. The aux is fixed for all iterations.
pub fn pgd_sequence(
    x: &Tensor,
    aux: &PgdAux,
    model: &Model,
    method: Method,
    plan: &AlterationPlan,
) -> Result<AlteredSequence> {
    plan.validate()?;
    check_unit_range(x)?;
    if model.spec.input_dim != x.len() {
        return Err(Error::shape(
            "pgd_sequence",
            format!("input dim {} vs model {}", x.len(), model.spec.input_dim),
        ));
    }
    let (graph, mut bindings) = walk_graph(model, method, aux)?;
    let mut inputs = Vec::with_capacity(plan.steps + 1);
    inputs.push(x.clone());
    let mut current = x.clone();
    for _ in 0..plan.steps {
        bindings.insert("x".into(), as_row(&current));
        let grad = graph.gradient(&bindings, "x")?;
        let data = current
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &gv)| (v + plan.epsilon_fgsm * sign(gv)).clamp(0.0, 1.0))
            .collect();
        current = Tensor::from_parts(vec![x.len()], data);
        inputs.push(current.clone());
    }
    Ok(AlteredSequence {
        sample_index: 0,
        inputs,
    })
}

/// Pick the walk's side information for sample `i` the way training would:
/// labels for cross-entropy objectives, a mined same/other-class pair for
/// the supervised triplet, augmented views for the self-supervised pair
/// methods. Deterministic per (master_seed, i).
pub fn choose_aux(
    data: &Dataset,
    i: usize,
    method: Method,
    master_seed: u64,
    aug_strength: f64,
    aug_mask_prob: f64,
) -> Result<PgdAux> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    if i >= data.len() {
        return Err(Error::InvalidArgument(format!(
            "sample index {i} out of range ({} samples)",
            data.len()
        )));
    }
    let mut stream = rng::stream(master_seed, &[rng::DOMAIN_PAIR, i as u64]);
    let row = |r: usize| Tensor::from_parts(vec![data.dim()], data.inputs.row(r).to_vec());
    match method {
        Method::CrossEntropy | Method::TripletEntropy => Ok(PgdAux::Label(data.labels[i])),
        Method::TripletSupervised => {
            let positives: Vec<usize> = (0..data.len())
                .filter(|&j| j != i && data.labels[j] == data.labels[i])
                .collect();
            let negatives: Vec<usize> = (0..data.len())
                .filter(|&j| data.labels[j] != data.labels[i])
                .collect();
            let (Some(&p), Some(&n)) =
                (positives.choose(&mut stream), negatives.choose(&mut stream))
            else {
                return Err(Error::Degenerate(format!(
                    "sample {i}: no positive/negative available for supervised pairing"
                )));
            };
            Ok(PgdAux::Pair {
                positive: row(p),
                negative: row(n),
            })
        }
        Method::TripletSelfSup => {
            let anchor = as_row(&row(i));
            let pair = losses::make_aug_pairs(&anchor, &mut stream, aug_strength, aug_mask_prob)?;
            if data.len() < 2 {
                return Err(Error::Degenerate(
                    "self-supervised pairing needs at least 2 samples".into(),
                ));
            }
            let j = {
                let k = stream.gen_range(0..data.len() - 1);
                if k >= i {
                    k + 1
                } else {
                    k
                }
            };
            let other = as_row(&row(j));
            let other_view =
                losses::make_aug_pairs(&other, &mut stream, aug_strength, aug_mask_prob)?;
            Ok(PgdAux::Pair {
                positive: Tensor::from_parts(vec![data.dim()], pair.views.data().to_vec()),
                negative: Tensor::from_parts(vec![data.dim()], other_view.views.data().to_vec()),
            })
        }
        Method::NtXent => {
            let anchor = as_row(&row(i));
            let pair = losses::make_aug_pairs(&anchor, &mut stream, aug_strength, aug_mask_prob)?;
            Ok(PgdAux::View(Tensor::from_parts(
                vec![data.dim()],
                pair.views.data().to_vec(),
            )))
        }
    }
}
