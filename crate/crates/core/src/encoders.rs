//! MLP encoders: configuration, initialization, forward encoding to the
//! embedding layer, optional classification head, and model file I/O.
//!
//! The representation of a batch is the embedding-layer activation (the
//! penultimate layer when a head is present). Relu is applied to every
//! encoder layer including the embedding layer; the head is a plain linear
//! map with no activation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::autodiff::{Bindings, GraphBuilder, NodeId};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"RMEN";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    /// Width of the representation layer.
    pub embedding_dim: usize,
    /// Classification head width; `None` for purely contrastive encoders.
    pub num_classes: Option<usize>,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding_dim must be positive".into(),
            ));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden layer widths must be positive".into(),
            ));
        }
        if let Some(c) = self.num_classes {
            if c < 2 {
                return Err(Error::InvalidArgument(
                    "a classification head needs at least 2 classes".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn has_head(&self) -> bool {
        self.num_classes.is_some()
    }

    /// (fan_in, fan_out) for each encoder layer, embedding layer last.
    pub fn encoder_layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_layers {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.embedding_dim));
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// fan_in x fan_out.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub head: Option<Layer>,
}

impl EncoderParams {
    /// Parameter tensors with their graph variable names, layer order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("w{i}"), &l.weight));
            out.push((format!("b{i}"), &l.bias));
        }
        if let Some(h) = &self.head {
            out.push(("wh".to_string(), &h.weight));
            out.push(("bh".to_string(), &h.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("w{i}"), &mut l.weight));
            out.push((format!("b{i}"), &mut l.bias));
        }
        if let Some(h) = &mut self.head {
            out.push(("wh".to_string(), &mut h.weight));
            out.push(("bh".to_string(), &mut h.bias));
        }
        out
    }

    /// Snap every parameter to the nearest float32, the storage precision.
    pub fn quantize_f32(&mut self) {
        for (_, t) in self.named_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

/// Scaled-uniform initialization, bound sqrt(6/fan_in), zero biases.
/// Deterministic per seed; values land on the float32 grid so a model file
/// round-trips bit-exactly.
pub fn init_params(spec: &EncoderSpec, seed: u64) -> Result<EncoderParams> {
    spec.validate()?;
    let mut stream = rng::stream(seed, &[rng::DOMAIN_INIT]);
    let mut draw_layer = |fan_in: usize, fan_out: usize| -> Layer {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| stream.gen_range(-bound..bound) as f32 as f64)
            .collect();
        Layer {
            weight: Tensor::from_parts(vec![fan_in, fan_out], data),
            bias: Tensor::zeros(&[fan_out]),
        }
    };
    let layers = spec
        .encoder_layer_dims()
        .into_iter()
        .map(|(i, o)| draw_layer(i, o))
        .collect();
    let head = spec.num_classes.map(|c| draw_layer(spec.embedding_dim, c));
    Ok(EncoderParams { layers, head })
}

fn check_batch(spec: &EncoderSpec, batch: &Tensor) -> Result<()> {
    if batch.rank() != 2 || batch.shape()[1] != spec.input_dim {
        return Err(Error::shape(
            "encode",
            format!(
                "batch shape {:?} does not match input_dim {}",
                batch.shape(),
                spec.input_dim
            ),
        ));
    }
    Ok(())
}

/// Embedding-layer activations for a batch, N x embedding_dim.
pub fn encode(params: &EncoderParams, spec: &EncoderSpec, batch: &Tensor) -> Result<Tensor> {
    check_batch(spec, batch)?;
    let mut h = batch.clone();
    for layer in &params.layers {
        let z = tensor::matmul(&h, &layer.weight);
        let z = tensor::add_bias(&z, &layer.bias);
        h = tensor::map(&z, |v| v.max(0.0));
    }
    Ok(h)
}

/// Head output for a batch, N x num_classes, no activation on the head.
pub fn logits(params: &EncoderParams, spec: &EncoderSpec, batch: &Tensor) -> Result<Tensor> {
    let head = params
        .head
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("encoder has no classification head".into()))?;
    let e = encode(params, spec, batch)?;
    let z = tensor::matmul(&e, &head.weight);
    Ok(tensor::add_bias(&z, &head.bias))
}

/// Graph form of `encode` on an input node; weight variables are named
/// w0/b0, w1/b1, ... and are shared across multiple forward passes in the
/// same graph.
pub fn encode_node(g: &mut GraphBuilder, spec: &EncoderSpec, input: NodeId) -> NodeId {
    let mut h = input;
    for i in 0..spec.encoder_layer_dims().len() {
        let w = g.var(&format!("w{i}"));
        let b = g.var(&format!("b{i}"));
        let z = g.matmul(h, w);
        let z = g.add_bias(z, b);
        h = g.relu(z);
    }
    h
}

/// Graph form of the head applied to an embedding node (variables wh/bh).
pub fn head_node(g: &mut GraphBuilder, spec: &EncoderSpec, embed: NodeId) -> Result<NodeId> {
    if !spec.has_head() {
        return Err(Error::InvalidArgument(
            "encoder has no classification head".into(),
        ));
    }
    let w = g.var("wh");
    let b = g.var("bh");
    let z = g.matmul(embed, w);
    Ok(g.add_bias(z, b))
}

/// Insert parameter tensors into graph bindings under their variable names.
pub fn bind_params(bindings: &mut Bindings, params: &EncoderParams) {
    for (name, t) in params.named() {
        bindings.insert(name, t.clone());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: EncoderSpec,
    pub params: EncoderParams,
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let fmt = |detail: String| Error::format(path.display().to_string(), detail);
    model.spec.validate()?;
    if !model.params.all_finite() {
        return Err(Error::NonFinite(format!(
            "refusing to save non-finite parameters to {}",
            path.display()
        )));
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_VERSION)?;
    let as_u32 = |v: usize, what: &str| -> Result<u32> {
        u32::try_from(v).map_err(|_| fmt(format!("{what} {v} exceeds u32 range")))
    };
    w.write_u32::<LittleEndian>(as_u32(model.spec.input_dim, "input_dim")?)?;
    w.write_u32::<LittleEndian>(as_u32(
        model.spec.hidden_layers.len(),
        "hidden layer count",
    )?)?;
    for &h in &model.spec.hidden_layers {
        w.write_u32::<LittleEndian>(as_u32(h, "hidden width")?)?;
    }
    w.write_u32::<LittleEndian>(as_u32(model.spec.embedding_dim, "embedding_dim")?)?;
    w.write_u32::<LittleEndian>(as_u32(model.spec.num_classes.unwrap_or(0), "num_classes")?)?;
    for (_, t) in model.params.named() {
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let fmt = |detail: &str| Error::format(path.display().to_string(), detail.to_string());
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fmt("truncated before magic"))?;
    if &magic != MODEL_MAGIC {
        return Err(fmt("bad magic, not a model file"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| fmt("truncated header"))?;
    if version != MODEL_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported model version {version}"),
        ));
    }
    let mut read_dim = |what: &str| -> Result<usize> {
        r.read_u32::<LittleEndian>()
            .map(|v| v as usize)
            .map_err(|_| Error::format(path.display().to_string(), format!("truncated at {what}")))
    };
    let input_dim = read_dim("input_dim")?;
    let n_hidden = read_dim("hidden layer count")?;
    if n_hidden > 1024 {
        return Err(fmt("implausible hidden layer count"));
    }
    let mut hidden_layers = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_layers.push(read_dim("hidden width")?);
    }
    let embedding_dim = read_dim("embedding_dim")?;
    let num_classes = read_dim("num_classes")?;
    let spec = EncoderSpec {
        input_dim,
        hidden_layers,
        embedding_dim,
        num_classes: if num_classes == 0 {
            None
        } else {
            Some(num_classes)
        },
    };
    spec.validate()
        .map_err(|e| Error::format(path.display().to_string(), format!("invalid header: {e}")))?;

    let mut read_layer = |fan_in: usize, fan_out: usize| -> Result<Layer> {
        let trunc = |_| {
            Error::format(
                path.display().to_string(),
                "truncated parameter block".to_string(),
            )
        };
        let mut wdata = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in * fan_out {
            wdata.push(r.read_f32::<LittleEndian>().map_err(trunc)? as f64);
        }
        let mut bdata = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            bdata.push(r.read_f32::<LittleEndian>().map_err(trunc)? as f64);
        }
        Ok(Layer {
            weight: Tensor::new(vec![fan_in, fan_out], wdata)?,
            bias: Tensor::new(vec![fan_out], bdata)?,
        })
    };
    let mut layers = Vec::new();
    for (i, o) in spec.encoder_layer_dims() {
        layers.push(read_layer(i, o)?);
    }
    let head = match spec.num_classes {
        Some(c) => Some(read_layer(spec.embedding_dim, c)?),
        None => None,
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fmt("trailing bytes after parameter block"));
    }
    Ok(Model {
        spec,
        params: EncoderParams { layers, head },
    })
}
