//! Training objectives: cross-entropy, supervised and self-supervised
//! triplet losses, NT-XENT, and the combined triplet-entropy loss, plus
//! the batch-construction helpers they need (supervised triplet mining,
//! augmentation pairing).
//!
//! Each loss exists in two forms that share one definition: a graph
//! builder that appends the loss to an expression graph (used by training
//! and by the gradient-sign walk, where the encoder forward pass sits
//! underneath), and a value-level function that binds precomputed tensors
//! to a fresh graph and evaluates it.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Bindings, GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Similarity mask value: exp(-1e30 - shift) underflows to exactly zero,
/// removing self-pairs from NT-XENT denominators without branching.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.inputs.rank() != 2 || self.inputs.shape()[0] != self.labels.len() {
            return Err(Error::shape(
                "labeled batch",
                format!(
                    "inputs {:?} vs {} labels",
                    self.inputs.shape(),
                    self.labels.len()
                ),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidData(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AugPairBatch {
    /// Unaltered inputs.
    pub anchors: Tensor,
    /// Augmented views, row i derived from anchor row i.
    pub views: Tensor,
}

/// (anchor, positive, negative) index triples into one embedding matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletIndices {
    pub triples: Vec<(usize, usize, usize)>,
}

fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * num_classes + l] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), num_classes], data)
}

/// Mean over the batch of -log softmax(logits)[label], via stable
/// log-sum-exp: (1/N) sum_i [lse(logits_i) - logits_i[y_i]].
pub fn ce_node(
    g: &mut GraphBuilder,
    logits: NodeId,
    labels: &[usize],
    num_classes: usize,
) -> NodeId {
    let lse = g.logsumexp(logits);
    let lse_total = g.sum(lse);
    let hot = g.constant(one_hot(labels, num_classes));
    let picked = g.mul(logits, hot);
    let picked_total = g.sum(picked);
    let diff = g.sub(lse_total, picked_total);
    g.scale(diff, 1.0 / labels.len() as f64)
}

pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "cross_entropy_loss",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let num_classes = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidData(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let mut g = GraphBuilder::new();
    let z = g.var("logits");
    let loss = ce_node(&mut g, z, labels, num_classes);
    let graph = g.finish(loss);
    let mut b = Bindings::new();
    b.insert("logits".into(), logits.clone());
    graph.evaluate(&b)
}

/// Mean over triples of max(0, |a-p|^2 - |a-n|^2 + margin) with the three
/// nodes holding row-aligned anchor/positive/negative embedding matrices.
pub fn triplet_node(
    g: &mut GraphBuilder,
    anchors: NodeId,
    positives: NodeId,
    negatives: NodeId,
    margin: f64,
) -> NodeId {
    let ap = g.sub(anchors, positives);
    let ap2 = g.mul(ap, ap);
    let d_ap = g.row_sum(ap2);
    let an = g.sub(anchors, negatives);
    let an2 = g.mul(an, an);
    let d_an = g.row_sum(an2);
    let gap = g.sub(d_ap, d_an);
    let shifted = g.add_scalar(gap, margin);
    let hinge = g.max_zero(shifted);
    g.mean(hinge)
}

pub fn triplet_loss(embeddings: &Tensor, triplets: &TripletIndices, margin: f64) -> Result<f64> {
    if margin <= 0.0 {
        return Err(Error::InvalidArgument("margin must be positive".into()));
    }
    if triplets.triples.is_empty() {
        return Err(Error::InvalidArgument("empty triplet set".into()));
    }
    if embeddings.rank() != 2 {
        return Err(Error::shape("triplet_loss", "embeddings must be a matrix"));
    }
    let a_idx: Vec<usize> = triplets.triples.iter().map(|t| t.0).collect();
    let p_idx: Vec<usize> = triplets.triples.iter().map(|t| t.1).collect();
    let n_idx: Vec<usize> = triplets.triples.iter().map(|t| t.2).collect();
    let mut g = GraphBuilder::new();
    let a = g.var("a");
    let p = g.var("p");
    let n = g.var("n");
    let loss = triplet_node(&mut g, a, p, n, margin);
    let graph = g.finish(loss);
    let mut b = Bindings::new();
    b.insert("a".into(), embeddings.gather_rows(&a_idx)?);
    b.insert("p".into(), embeddings.gather_rows(&p_idx)?);
    b.insert("n".into(), embeddings.gather_rows(&n_idx)?);
    graph.evaluate(&b)
}

/// NT-XENT over a 2N pool: embeddings L2-normalized internally, cosine
/// similarities divided by the temperature, each sample's positive is its
/// paired row, denominator runs over the other 2N-1 pool members, mean
/// taken over all 2N anchor roles. `n` is the pair count.
pub fn nt_xent_node(
    g: &mut GraphBuilder,
    anchor_embeds: NodeId,
    view_embeds: NodeId,
    n: usize,
    temperature: f64,
) -> NodeId {
    let pool = g.concat_rows(anchor_embeds, view_embeds);
    // row-wise inverse norms as sq_norm^(-1/2) so everything stays inside
    // the graph; zero rows surface as a non-finite log
    let sq = g.mul(pool, pool);
    let row_sq = g.row_sum(sq);
    let log_sq = g.log(row_sq);
    let neg_half_log = g.scale(log_sq, -0.5);
    let inv_norm = g.exp(neg_half_log);
    let unit = g.scale_rows(pool, inv_norm);
    let unit_t = g.transpose(unit);
    let sims = g.matmul(unit, unit_t);
    let scaled = g.scale(sims, 1.0 / temperature);

    let two_n = 2 * n;
    let mut mask = vec![0.0; two_n * two_n];
    let mut partner = vec![0.0; two_n * two_n];
    for i in 0..two_n {
        mask[i * two_n + i] = MASK_NEG;
        let j = (i + n) % two_n;
        partner[i * two_n + j] = 1.0;
    }
    let mask = g.constant(Tensor::from_parts(vec![two_n, two_n], mask));
    let partner = g.constant(Tensor::from_parts(vec![two_n, two_n], partner));

    let masked = g.add(scaled, mask);
    let denom = g.logsumexp(masked);
    let denom_total = g.sum(denom);
    let pos_entries = g.mul(scaled, partner);
    let pos = g.row_sum(pos_entries);
    let pos_total = g.sum(pos);
    let diff = g.sub(denom_total, pos_total);
    g.scale(diff, 1.0 / two_n as f64)
}

pub fn nt_xent_loss(anchor_embeds: &Tensor, view_embeds: &Tensor, temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(
            "temperature must be positive".into(),
        ));
    }
    if anchor_embeds.rank() != 2
        || anchor_embeds.shape() != view_embeds.shape()
        || anchor_embeds.shape()[0] < 2
    {
        return Err(Error::shape(
            "nt_xent_loss",
            format!(
                "need two same-shape embedding matrices with at least 2 rows, got {:?} and {:?}",
                anchor_embeds.shape(),
                view_embeds.shape()
            ),
        ));
    }
    let n = anchor_embeds.shape()[0];
    reject_zero_rows(anchor_embeds, "anchor")?;
    reject_zero_rows(view_embeds, "view")?;
    let mut g = GraphBuilder::new();
    let a = g.var("a");
    let v = g.var("v");
    let loss = nt_xent_node(&mut g, a, v, n, temperature);
    let graph = g.finish(loss);
    let mut b = Bindings::new();
    b.insert("a".into(), anchor_embeds.clone());
    b.insert("v".into(), view_embeds.clone());
    graph.evaluate(&b)
}

/// Cosine normalization is undefined on a zero vector, so batches that
/// produce one are degenerate rather than errors.
pub fn reject_zero_rows(embeds: &Tensor, what: &str) -> Result<()> {
    for r in 0..embeds.nrows() {
        if embeds.row(r).iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!(
                "{what} embedding row {r} has zero norm, normalization undefined"
            )));
        }
    }
    Ok(())
}

/// Cross-entropy plus triplet loss at unit weights.
pub fn triplet_entropy_loss(
    logits: &Tensor,
    embeddings: &Tensor,
    labels: &[usize],
    triplets: &TripletIndices,
    margin: f64,
) -> Result<f64> {
    Ok(cross_entropy_loss(logits, labels)? + triplet_loss(embeddings, triplets, margin)?)
}

/// One triple per anchor that has a same-class partner: positive drawn
/// uniformly from same-class others, negative uniformly from the rest.
pub fn mine_triplets_supervised(labels: &[usize], rng: &mut ChaCha8Rng) -> Result<TripletIndices> {
    let n = labels.len();
    let mut triples = Vec::new();
    let mut any_negative = false;
    for a in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&i| i != a && labels[i] == labels[a])
            .collect();
        let negatives: Vec<usize> = (0..n).filter(|&i| labels[i] != labels[a]).collect();
        if !negatives.is_empty() {
            any_negative = true;
        }
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let p = *positives.choose(rng).expect("nonempty positives");
        let neg = *negatives.choose(rng).expect("nonempty negatives");
        triples.push((a, p, neg));
    }
    if !any_negative {
        return Err(Error::Degenerate(
            "single-class batch: no negatives available".into(),
        ));
    }
    if triples.is_empty() {
        return Err(Error::Degenerate(
            "no anchor has a same-class positive".into(),
        ));
    }
    Ok(TripletIndices { triples })
}

/// Negative view index for each of `n` anchors in the self-supervised
/// triplet setting: a uniformly drawn other sample's view.
pub fn mine_negatives_selfsup(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Degenerate(
            "self-supervised negatives need at least 2 samples".into(),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let j = rng.gen_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

/// Augmented views: additive gaussian noise at the given strength, then
/// random feature masking at `mask_prob`, then a clip to [0,1]. Anchors
/// pass through unaltered.
pub fn make_aug_pairs(
    inputs: &Tensor,
    rng: &mut ChaCha8Rng,
    strength: f64,
    mask_prob: f64,
) -> Result<AugPairBatch> {
    if strength < 0.0 {
        return Err(Error::InvalidArgument(
            "augmentation strength must be nonnegative".into(),
        ));
    }
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::InvalidArgument("mask_prob must be in [0,1]".into()));
    }
    if inputs.rank() != 2 {
        return Err(Error::shape("make_aug_pairs", "inputs must be a matrix"));
    }
    let mut view = Vec::with_capacity(inputs.len());
    for &x in inputs.data() {
        let noise: f64 = StandardNormal.sample(rng);
        view.push((x + strength * noise).clamp(0.0, 1.0));
    }
    for v in view.iter_mut() {
        if rng.gen_bool(mask_prob) {
            *v = 0.0;
        }
    }
    Ok(AugPairBatch {
        anchors: inputs.clone(),
        views: Tensor::from_parts(inputs.shape().to_vec(), view),
    })
}
