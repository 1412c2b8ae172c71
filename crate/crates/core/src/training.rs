//! Optimizers and the training loop that produces encoders for every
//! combination of objective and optimizer.
//!
//! Both optimizers run at learning rate 0.001 by default. SGD uses the
//! shifted-variable form of Nesterov momentum (velocity update followed by
//! a lookahead step), Adam the standard bias-corrected update. The loop is
//! fully seeded: epoch shuffles, triplet mining, and augmentations each
//! draw from their own derived streams, so one seed pins the whole run.

use std::collections::BTreeMap;

use crate::autodiff::{Bindings, GraphBuilder};
use crate::datagen::Dataset;
use crate::encoders::{self, EncoderParams, EncoderSpec};
use crate::error::{Error, Result};
use crate::losses;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    CrossEntropy,
    TripletSupervised,
    TripletSelfSup,
    NtXent,
    TripletEntropy,
}

pub const ALL_METHODS: [Method; 5] = [
    Method::CrossEntropy,
    Method::TripletSupervised,
    Method::TripletSelfSup,
    Method::NtXent,
    Method::TripletEntropy,
];

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::CrossEntropy => "cross-entropy",
            Method::TripletSupervised => "triplet-sup",
            Method::TripletSelfSup => "triplet-ss",
            Method::NtXent => "nt-xent",
            Method::TripletEntropy => "triplet-entropy",
        }
    }

    /// Accepts the canonical names plus underscore and squashed spellings
    /// ("cross_entropy", "ntxent").
    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "cross-entropy" => Ok(Method::CrossEntropy),
            "triplet-sup" => Ok(Method::TripletSupervised),
            "triplet-ss" => Ok(Method::TripletSelfSup),
            "nt-xent" | "ntxent" => Ok(Method::NtXent),
            "triplet-entropy" => Ok(Method::TripletEntropy),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?}, expected one of cross-entropy, \
                 triplet-sup, triplet-ss, nt-xent, triplet-entropy"
            ))),
        }
    }

    /// Methods with a cross-entropy term need a classification head.
    pub fn needs_head(&self) -> bool {
        matches!(self, Method::CrossEntropy | Method::TripletEntropy)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdNesterov,
    Adam,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdNesterov => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s {
            "sgd" => Ok(OptimizerKind::SgdNesterov),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer {other:?}, expected sgd or adam"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd_nesterov() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdNesterov,
            learning_rate: 0.001,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..Self::sgd_nesterov()
        }
    }

    pub fn of_kind(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::SgdNesterov => Self::sgd_nesterov(),
            OptimizerKind::Adam => Self::adam(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.beta1 == 0.0
            || self.beta2 == 0.0
        {
            return Err(Error::InvalidArgument("betas must be in (0,1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidArgument("eps must be positive".into()));
        }
        Ok(())
    }
}

fn check_same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            what,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Nesterov momentum in the shifted-variable form:
/// v <- mu v - lr g, then w <- w + mu v - lr g with the updated v.
pub fn sgd_nesterov_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_same_shape("sgd_nesterov_step", param, grad)?;
    check_same_shape("sgd_nesterov_step", param, velocity)?;
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);
    for ((w, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mu * *v - lr * g;
        *w += mu * *v - lr * g;
    }
    Ok(())
}

/// Bias-corrected Adam; `t` is the 1-based step index.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    cfg: &OptimizerConfig,
    t: u64,
) -> Result<()> {
    check_same_shape("adam_step", param, grad)?;
    check_same_shape("adam_step", param, m)?;
    check_same_shape("adam_step", param, v)?;
    if t == 0 {
        return Err(Error::InvalidArgument("adam step index starts at 1".into()));
    }
    let (lr, b1, b2, eps) = (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((w, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Per-parameter optimizer state keyed by parameter name.
pub struct Optimizer {
    cfg: OptimizerConfig,
    slot_a: BTreeMap<String, Tensor>,
    slot_b: BTreeMap<String, Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            slot_a: BTreeMap::new(),
            slot_b: BTreeMap::new(),
            t: 0,
        })
    }

    pub fn step(
        &mut self,
        params: &mut EncoderParams,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.t += 1;
        for (name, param) in params.named_mut() {
            let grad = grads.get(&name).ok_or_else(|| {
                Error::InvalidArgument(format!("no gradient for parameter {name}"))
            })?;
            let a = self
                .slot_a
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            match self.cfg.kind {
                OptimizerKind::SgdNesterov => {
                    sgd_nesterov_step(param, grad, a, &self.cfg)?;
                }
                OptimizerKind::Adam => {
                    let b = self
                        .slot_b
                        .entry(name)
                        .or_insert_with(|| Tensor::zeros(param.shape()));
                    adam_step(param, grad, a, b, &self.cfg, self.t)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub margin: f64,
    pub temperature: f64,
    pub aug_strength: f64,
    pub aug_mask_prob: f64,
}

impl TrainConfig {
    pub fn new(method: Method, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs,
            batch_size,
            seed,
            margin: 1.0,
            temperature: 0.5,
            aug_strength: 0.1,
            aug_mask_prob: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 2".into(),
            ));
        }
        if self.margin <= 0.0 || self.temperature <= 0.0 {
            return Err(Error::InvalidArgument(
                "margin and temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Loss and parameter gradients for one batch under the given method.
fn batch_step(
    spec: &EncoderSpec,
    params: &EncoderParams,
    cfg: &TrainConfig,
    inputs: &Tensor,
    labels: &[usize],
    num_classes: usize,
    batch_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = GraphBuilder::new();
    let mut bindings = Bindings::new();
    encoders::bind_params(&mut bindings, params);

    let loss_node = match cfg.method {
        Method::CrossEntropy => {
            let x = g.var("x");
            let e = encoders::encode_node(&mut g, spec, x);
            let z = encoders::head_node(&mut g, spec, e)?;
            bindings.insert("x".into(), inputs.clone());
            losses::ce_node(&mut g, z, labels, num_classes)
        }
        Method::TripletSupervised => {
            let triplets = losses::mine_triplets_supervised(labels, batch_rng)?;
            let (a_idx, p_idx, n_idx) = split_triples(&triplets);
            let xa = g.var("xa");
            let xp = g.var("xp");
            let xn = g.var("xn");
            let ea = encoders::encode_node(&mut g, spec, xa);
            let ep = encoders::encode_node(&mut g, spec, xp);
            let en = encoders::encode_node(&mut g, spec, xn);
            bindings.insert("xa".into(), inputs.gather_rows(&a_idx)?);
            bindings.insert("xp".into(), inputs.gather_rows(&p_idx)?);
            bindings.insert("xn".into(), inputs.gather_rows(&n_idx)?);
            losses::triplet_node(&mut g, ea, ep, en, cfg.margin)
        }
        Method::TripletSelfSup => {
            let pairs =
                losses::make_aug_pairs(inputs, batch_rng, cfg.aug_strength, cfg.aug_mask_prob)?;
            let negs = losses::mine_negatives_selfsup(labels.len(), batch_rng)?;
            let xa = g.var("xa");
            let xp = g.var("xp");
            let xn = g.var("xn");
            let ea = encoders::encode_node(&mut g, spec, xa);
            let ep = encoders::encode_node(&mut g, spec, xp);
            let en = encoders::encode_node(&mut g, spec, xn);
            bindings.insert("xa".into(), pairs.anchors.clone());
            bindings.insert("xn".into(), pairs.views.gather_rows(&negs)?);
            bindings.insert("xp".into(), pairs.views);
            losses::triplet_node(&mut g, ea, ep, en, cfg.margin)
        }
        Method::NtXent => {
            let pairs =
                losses::make_aug_pairs(inputs, batch_rng, cfg.aug_strength, cfg.aug_mask_prob)?;
            // relu can zero a whole embedding row, which the cosine
            // similarities cannot normalize; such batches are skipped
            losses::reject_zero_rows(&encoders::encode(params, spec, &pairs.anchors)?, "anchor")?;
            losses::reject_zero_rows(&encoders::encode(params, spec, &pairs.views)?, "view")?;
            let xa = g.var("xa");
            let xv = g.var("xv");
            let ea = encoders::encode_node(&mut g, spec, xa);
            let ev = encoders::encode_node(&mut g, spec, xv);
            bindings.insert("xa".into(), pairs.anchors.clone());
            bindings.insert("xv".into(), pairs.views);
            losses::nt_xent_node(&mut g, ea, ev, labels.len(), cfg.temperature)
        }
        Method::TripletEntropy => {
            let triplets = losses::mine_triplets_supervised(labels, batch_rng)?;
            let (a_idx, p_idx, n_idx) = split_triples(&triplets);
            let x = g.var("x");
            let e = encoders::encode_node(&mut g, spec, x);
            let z = encoders::head_node(&mut g, spec, e)?;
            let ce = losses::ce_node(&mut g, z, labels, num_classes);
            let xa = g.var("xa");
            let xp = g.var("xp");
            let xn = g.var("xn");
            let ea = encoders::encode_node(&mut g, spec, xa);
            let ep = encoders::encode_node(&mut g, spec, xp);
            let en = encoders::encode_node(&mut g, spec, xn);
            let trip = losses::triplet_node(&mut g, ea, ep, en, cfg.margin);
            bindings.insert("x".into(), inputs.clone());
            bindings.insert("xa".into(), inputs.gather_rows(&a_idx)?);
            bindings.insert("xp".into(), inputs.gather_rows(&p_idx)?);
            bindings.insert("xn".into(), inputs.gather_rows(&n_idx)?);
            g.add(ce, trip)
        }
    };

    let graph = g.finish(loss_node);
    let loss = graph.evaluate(&bindings)?;
    let mut grads = graph.gradients(&bindings)?;
    grads.retain(|name, _| name.starts_with('w') || name.starts_with('b'));
    Ok((loss, grads))
}

fn split_triples(t: &losses::TripletIndices) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let a = t.triples.iter().map(|x| x.0).collect();
    let p = t.triples.iter().map(|x| x.1).collect();
    let n = t.triples.iter().map(|x| x.2).collect();
    (a, p, n)
}

/// Train one encoder. Returns the final parameters (snapped to float32 so
/// model files round-trip exactly) and the mean batch loss per epoch.
/// Batches that cannot form the method's pairs (a single-class shuffle,
/// say) are skipped; an epoch where every batch is skipped is an error.
pub fn train(
    spec: &EncoderSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    opt_cfg: &OptimizerConfig,
) -> Result<(EncoderParams, Vec<f64>)> {
    cfg.validate()?;
    opt_cfg.validate()?;
    data.validate()?;
    spec.validate()?;
    if spec.input_dim != data.dim() {
        return Err(Error::shape(
            "train",
            format!(
                "spec input_dim {} vs dataset dim {}",
                spec.input_dim,
                data.dim()
            ),
        ));
    }
    if cfg.method.needs_head() != spec.has_head() {
        return Err(Error::InvalidArgument(format!(
            "method {} {} a classification head",
            cfg.method,
            if cfg.method.needs_head() {
                "requires"
            } else {
                "must not have"
            },
        )));
    }
    let num_classes = data.num_classes();
    if let Some(c) = spec.num_classes {
        if c != num_classes {
            return Err(Error::InvalidArgument(format!(
                "spec has {c} classes but dataset has {num_classes}"
            )));
        }
    }

    let mut params = encoders::init_params(spec, cfg.seed)?;
    let mut opt = Optimizer::new(*opt_cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = rng::stream(cfg.seed, &[rng::DOMAIN_TRAIN, epoch as u64]);
        shuffle(&mut order, &mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let inputs = data.inputs.gather_rows(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut batch_rng = rng::stream(cfg.seed, &[rng::DOMAIN_PAIR, epoch as u64, b as u64]);
            let (loss, grads) = match batch_step(
                spec,
                &params,
                cfg,
                &inputs,
                &labels,
                num_classes,
                &mut batch_rng,
            ) {
                Ok(v) => v,
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            };
            opt.step(&mut params, &grads)?;
            epoch_loss += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Degenerate(format!(
                "epoch {epoch}: every batch was degenerate for method {}",
                cfg.method
            )));
        }
        history.push(epoch_loss / batches as f64);
    }
    params.quantize_f32();
    Ok((params, history))
}

fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
}

/// Fraction of samples whose argmax logit matches the label.
pub fn classification_accuracy(
    params: &EncoderParams,
    spec: &EncoderSpec,
    data: &Dataset,
) -> Result<f64> {
    let z = encoders::logits(params, spec, &data.inputs)?;
    let mut hits = 0usize;
    for (r, &label) in data.labels.iter().enumerate() {
        let row = z.row(r);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("nonempty row");
        if pred == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.labels.len() as f64)
}
