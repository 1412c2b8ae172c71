//! Reverse-mode differentiation over an explicit expression graph.
//!
//! A `GraphBuilder` assembles tensor-valued nodes into a directed acyclic
//! graph with a single scalar output. `ExprGraph::evaluate` runs the
//! forward pass against named variable bindings; `gradients` runs one
//! backward sweep and returns the gradient for every bound variable, which
//! is what both the optimizers (gradients w.r.t. parameters) and the
//! adversarial walk (gradient w.r.t. the input) consume.
//!
//! Gradient conventions worth pinning down once:
//! relu passes zero gradient at exactly zero, and log-sum-exp reduces over
//! the last axis (a vector collapses to a scalar, a matrix to one value
//! per row) with the usual max-shift for stability.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub type Bindings = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Var(String),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    LogSumExp(NodeId),
    RowSum(NodeId),
    SqNorm(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatRows(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Var(_) => "var",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::ScaleRows(..) => "scale_rows",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::LogSumExp(_) => "logsumexp",
            Op::RowSum(_) => "row_sum",
            Op::SqNorm(_) => "sq_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatRows(..) => "concat_rows",
        }
    }
}

#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Op>,
    vars: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// Named input. Repeated calls with the same name return the same node.
    pub fn var(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.vars.get(name) {
            return id;
        }
        let id = self.push(Op::Var(name.to_string()));
        self.vars.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// Matrix plus a bias vector broadcast across rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }

    /// Row i of the matrix scaled by entry i of the vector.
    pub fn scale_rows(&mut self, a: NodeId, v: NodeId) -> NodeId {
        self.push(Op::ScaleRows(a, v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    /// Hinge clamp, identical to relu; reads better in margin losses.
    pub fn max_zero(&mut self, a: NodeId) -> NodeId {
        self.relu(a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    /// Log-sum-exp over the last axis.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExp(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum(a))
    }

    /// Sum of squared entries, a scalar.
    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SqNorm(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Stack two matrices with equal column counts, first on top.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatRows(a, b))
    }

    pub fn finish(self, output: NodeId) -> ExprGraph {
        ExprGraph {
            nodes: self.nodes,
            vars: self.vars,
            output,
        }
    }
}

pub struct ExprGraph {
    nodes: Vec<Op>,
    vars: BTreeMap<String, NodeId>,
    output: NodeId,
}

impl ExprGraph {
    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    fn forward(&self, bindings: &Bindings) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, op) in self.nodes.iter().enumerate() {
            let val = match op {
                Op::Var(name) => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::UnboundVariable(name.clone()))?,
                Op::Const(t) => t.clone(),
                Op::MatMul(a, b) => {
                    let (a, b) = (&values[a.0], &values[b.0]);
                    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                        return Err(shape_err(idx, op, &[a, b]));
                    }
                    tensor::matmul(a, b)
                }
                Op::Transpose(a) => {
                    let a = &values[a.0];
                    if a.rank() != 2 {
                        return Err(shape_err(idx, op, &[a]));
                    }
                    tensor::transpose(a)
                }
                Op::Add(a, b) => {
                    let (a, b) = (&values[a.0], &values[b.0]);
                    if a.shape() != b.shape() {
                        return Err(shape_err(idx, op, &[a, b]));
                    }
                    tensor::zip_map(a, b, |x, y| x + y)
                }
                Op::Sub(a, b) => {
                    let (a, b) = (&values[a.0], &values[b.0]);
                    if a.shape() != b.shape() {
                        return Err(shape_err(idx, op, &[a, b]));
                    }
                    tensor::zip_map(a, b, |x, y| x - y)
                }
                Op::Mul(a, b) => {
                    let (a, b) = (&values[a.0], &values[b.0]);
                    if a.shape() != b.shape() {
                        return Err(shape_err(idx, op, &[a, b]));
                    }
                    tensor::zip_map(a, b, |x, y| x * y)
                }
                Op::AddBias(a, bias) => {
                    let (a, bias) = (&values[a.0], &values[bias.0]);
                    if a.rank() != 2 || bias.rank() != 1 || bias.len() != a.shape()[1] {
                        return Err(shape_err(idx, op, &[a, bias]));
                    }
                    tensor::add_bias(a, bias)
                }
                Op::ScaleRows(a, v) => {
                    let (a, v) = (&values[a.0], &values[v.0]);
                    if a.rank() != 2 || v.rank() != 1 || v.len() != a.shape()[0] {
                        return Err(shape_err(idx, op, &[a, v]));
                    }
                    tensor::scale_rows(a, v)
                }
                Op::Scale(a, c) => tensor::map(&values[a.0], |x| x * c),
                Op::AddScalar(a, c) => tensor::map(&values[a.0], |x| x + c),
                Op::Relu(a) => tensor::map(&values[a.0], |x| x.max(0.0)),
                Op::Exp(a) => tensor::map(&values[a.0], f64::exp),
                Op::Log(a) => tensor::map(&values[a.0], f64::ln),
                Op::LogSumExp(a) => {
                    let a = &values[a.0];
                    if a.rank() == 0 || a.is_empty() {
                        return Err(shape_err(idx, op, &[a]));
                    }
                    tensor::logsumexp_last(a)
                }
                Op::RowSum(a) => {
                    let a = &values[a.0];
                    if a.rank() == 0 {
                        return Err(shape_err(idx, op, &[a]));
                    }
                    tensor::row_sum(a)
                }
                Op::SqNorm(a) => {
                    let a = &values[a.0];
                    Tensor::scalar(a.data().iter().map(|x| x * x).sum())
                }
                Op::Sum(a) => Tensor::scalar(values[a.0].data().iter().sum()),
                Op::Mean(a) => {
                    let a = &values[a.0];
                    if a.is_empty() {
                        return Err(Error::Degenerate(format!(
                            "mean over an empty tensor at node {idx}"
                        )));
                    }
                    Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (&values[a.0], &values[b.0]);
                    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                        return Err(shape_err(idx, op, &[a, b]));
                    }
                    tensor::concat_rows(a, b)
                }
            };
            if !val.all_finite() {
                return Err(Error::NonFinite(format!(
                    "{} at node {idx} produced a non-finite value",
                    op.name()
                )));
            }
            values.push(val);
        }
        Ok(values)
    }

    /// Forward pass; the output node must be scalar.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<f64> {
        let values = self.forward(bindings)?;
        let out = &values[self.output.0];
        if out.rank() != 0 {
            return Err(Error::shape(
                "graph output",
                format!("expected a scalar output, got shape {:?}", out.shape()),
            ));
        }
        Ok(out.data()[0])
    }

    /// One backward sweep; gradient of the scalar output for every bound
    /// variable that appears in the graph. A variable the output does not
    /// depend on gets a zero gradient of its bound shape.
    pub fn gradients(&self, bindings: &Bindings) -> Result<BTreeMap<String, Tensor>> {
        let values = self.forward(bindings)?;
        let out = &values[self.output.0];
        if out.rank() != 0 {
            return Err(Error::shape(
                "graph output",
                format!("expected a scalar output, got shape {:?}", out.shape()),
            ));
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[self.output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let grad = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx] {
                Op::Var(_) | Op::Const(_) => {
                    adjoints[idx] = Some(grad);
                }
                Op::MatMul(a, b) => {
                    let da = tensor::matmul(&grad, &tensor::transpose(&values[b.0]));
                    let db = tensor::matmul(&tensor::transpose(&values[a.0]), &grad);
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
                Op::Transpose(a) => {
                    accumulate(&mut adjoints, *a, tensor::transpose(&grad));
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, *a, grad.clone());
                    accumulate(&mut adjoints, *b, grad);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adjoints, *a, grad.clone());
                    accumulate(&mut adjoints, *b, tensor::map(&grad, |x| -x));
                }
                Op::Mul(a, b) => {
                    accumulate(
                        &mut adjoints,
                        *a,
                        tensor::zip_map(&grad, &values[b.0], |g, y| g * y),
                    );
                    accumulate(
                        &mut adjoints,
                        *b,
                        tensor::zip_map(&grad, &values[a.0], |g, x| g * x),
                    );
                }
                Op::AddBias(a, bias) => {
                    let cols = grad.ncols();
                    let mut db = vec![0.0; cols];
                    for (i, g) in grad.data().iter().enumerate() {
                        db[i % cols] += g;
                    }
                    accumulate(&mut adjoints, *a, grad);
                    accumulate(&mut adjoints, *bias, Tensor::vector(db));
                }
                Op::ScaleRows(a, v) => {
                    let cols = values[a.0].ncols();
                    let da = tensor::scale_rows(&grad, &values[v.0]);
                    let mut dv = vec![0.0; values[v.0].len()];
                    for (i, (g, x)) in grad.data().iter().zip(values[a.0].data()).enumerate() {
                        dv[i / cols] += g * x;
                    }
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *v, Tensor::vector(dv));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut adjoints, *a, tensor::map(&grad, |g| g * c));
                }
                Op::AddScalar(a, _) => {
                    accumulate(&mut adjoints, *a, grad);
                }
                Op::Relu(a) => {
                    let da =
                        tensor::zip_map(&grad, &values[a.0], |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut adjoints, *a, da);
                }
                Op::Exp(a) => {
                    accumulate(
                        &mut adjoints,
                        *a,
                        tensor::zip_map(&grad, &values[idx], |g, e| g * e),
                    );
                }
                Op::Log(a) => {
                    accumulate(
                        &mut adjoints,
                        *a,
                        tensor::zip_map(&grad, &values[a.0], |g, x| g / x),
                    );
                }
                Op::LogSumExp(a) => {
                    let input = &values[a.0];
                    let out = &values[idx];
                    let cols = input.ncols();
                    let data = input
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let r = i / cols;
                            grad.data()[r] * (x - out.data()[r]).exp()
                        })
                        .collect();
                    accumulate(
                        &mut adjoints,
                        *a,
                        Tensor::from_parts(input.shape().to_vec(), data),
                    );
                }
                Op::RowSum(a) => {
                    let input = &values[a.0];
                    let cols = input.ncols();
                    let data = (0..input.len()).map(|i| grad.data()[i / cols]).collect();
                    accumulate(
                        &mut adjoints,
                        *a,
                        Tensor::from_parts(input.shape().to_vec(), data),
                    );
                }
                Op::SqNorm(a) => {
                    let g = grad.data()[0];
                    accumulate(
                        &mut adjoints,
                        *a,
                        tensor::map(&values[a.0], |x| 2.0 * g * x),
                    );
                }
                Op::Sum(a) => {
                    let g = grad.data()[0];
                    accumulate(&mut adjoints, *a, tensor::map(&values[a.0], |_| g));
                }
                Op::Mean(a) => {
                    let g = grad.data()[0] / values[a.0].len() as f64;
                    accumulate(&mut adjoints, *a, tensor::map(&values[a.0], |_| g));
                }
                Op::ConcatRows(a, b) => {
                    let top = values[a.0].len();
                    let cols = grad.ncols();
                    let rows_a = top / cols;
                    let da = Tensor::from_parts(vec![rows_a, cols], grad.data()[..top].to_vec());
                    let db = Tensor::from_parts(
                        vec![grad.nrows() - rows_a, cols],
                        grad.data()[top..].to_vec(),
                    );
                    accumulate(&mut adjoints, *a, da);
                    accumulate(&mut adjoints, *b, db);
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (name, id) in &self.vars {
            let g = match adjoints[id.0].take() {
                Some(g) => g,
                None => Tensor::zeros(bindings[name].shape()),
            };
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }

    /// Gradient for a single named variable.
    pub fn gradient(&self, bindings: &Bindings, wrt: &str) -> Result<Tensor> {
        if !self.vars.contains_key(wrt) {
            return Err(Error::UnboundVariable(wrt.to_string()));
        }
        let mut grads = self.gradients(bindings)?;
        Ok(grads
            .remove(wrt)
            .expect("gradient for every graph variable"))
    }

    /// Compare the analytic gradient for `wrt` against central finite
    /// differences; returns the worst relative error over all entries,
    /// with the difference normalized by `max(|analytic|, |numeric|, 1e-8)`.
    pub fn finite_difference_check(
        &self,
        bindings: &Bindings,
        wrt: &str,
        step: f64,
    ) -> Result<f64> {
        let analytic = self.gradient(bindings, wrt)?;
        let base = bindings
            .get(wrt)
            .ok_or_else(|| Error::UnboundVariable(wrt.to_string()))?
            .clone();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut probe = bindings.clone();
            let mut plus = base.clone();
            plus.data_mut()[i] += step;
            probe.insert(wrt.to_string(), plus);
            let f_plus = self.evaluate(&probe)?;

            let mut minus = base.clone();
            minus.data_mut()[i] -= step;
            probe.insert(wrt.to_string(), minus);
            let f_minus = self.evaluate(&probe)?;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        Ok(worst)
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], id: NodeId, grad: Tensor) {
    match &mut adjoints[id.0] {
        Some(existing) => {
            *existing = tensor::zip_map(existing, &grad, |a, b| a + b);
        }
        slot @ None => *slot = Some(grad),
    }
}

fn shape_err(idx: usize, op: &Op, inputs: &[&Tensor]) -> Error {
    let shapes: Vec<String> = inputs.iter().map(|t| format!("{:?}", t.shape())).collect();
    Error::shape(
        format!("{} at node {idx}", op.name()),
        format!("incompatible input shapes {}", shapes.join(" and ")),
    )
}
