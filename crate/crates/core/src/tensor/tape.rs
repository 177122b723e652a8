use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{check_finite, numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with supplied running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Operations the tape can record. Inputs are passed separately to [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// inputs: x (N×C×H×W), kernel (O×C×k×k)
    Conv2d { stride: usize, pad: usize },
    /// inputs: x (N×C×H×W), gamma (C), beta (C)
    BatchNorm2d { eps: f64, mode: BatchNormMode },
    Silu,
    Sigmoid,
    MaxPool2d { k: usize, stride: usize },
    UpsampleNearest { factor: usize },
    /// inputs: any number of N×Cᵢ×H×W tensors
    ConcatChannels,
    Add,
    Sub,
    Mul,
    MulScalar(f64),
    AddScalar(f64),
    Sum,
    SqrtElem,
    Square,
    /// inputs: x (N×C×H×W), bias (C)
    ChannelBias,
    /// out[i] = x[indices[i]], reshaped to `shape`.
    Gather { indices: Vec<usize>, shape: Vec<usize> },
    /// Elementwise add of a constant tensor of the same shape.
    AddConst(Rc<Tensor>),
    /// Elementwise product with a constant tensor of the same shape.
    MulConst(Rc<Tensor>),
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::BatchNorm2d { .. } => "batchnorm2d",
            Primitive::Silu => "silu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::MaxPool2d { .. } => "maxpool2d",
            Primitive::UpsampleNearest { .. } => "upsample_nearest",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MulScalar(_) => "mul_scalar",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Sum => "sum",
            Primitive::SqrtElem => "sqrt_elem",
            Primitive::Square => "square",
            Primitive::ChannelBias => "channel_bias",
            Primitive::Gather { .. } => "gather",
            Primitive::AddConst(_) => "add_const",
            Primitive::MulConst(_) => "mul_const",
        }
    }
}

enum Saved {
    None,
    Conv(ConvGeom),
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        train: bool,
    },
    MaxPool(Vec<usize>),
    Concat(Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Option<Primitive>,
    inputs: Vec<usize>,
    saved: Saved,
    requires_grad: bool,
    name: Option<String>,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of every grad-requiring leaf, keyed by leaf.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<usize, Tensor>,
    names: BTreeMap<String, usize>,
}

impl GradientMap {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|id| self.grads.get(id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Named gradients in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .filter_map(|(n, id)| self.grads.get(id).map(|g| (n.as_str(), g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf; it takes part in backward iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        self.leaf_inner(tensor, None)
    }

    /// Leaf addressable by name in the resulting [`GradientMap`].
    pub fn named_leaf(&self, name: &str, tensor: Tensor) -> Var<'_> {
        self.leaf_inner(tensor, Some(name.to_string()))
    }

    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf_inner(tensor.with_requires_grad(false), None)
    }

    fn leaf_inner(&self, mut tensor: Tensor, name: Option<String>) -> Var<'_> {
        let requires_grad = tensor.requires_grad();
        tensor.zero_grad();
        self.push(Node {
            value: Rc::new(tensor),
            op: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad,
            name,
        })
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply<'t>(&'t self, op: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::InvalidArgument(
                    "input recorded on a different tape".into(),
                ));
            }
        }
        let vals: Vec<Rc<Tensor>> = inputs.iter().map(|v| self.value(v.id)).collect();
        let (out, saved) = forward(&op, &vals)?;
        check_finite(out.data()).map_err(|e| {
            Error::shape(op.name(), format!("produced a non-finite value: {e}"))
        })?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        Ok(self.push(Node {
            value: Rc::new(out),
            op: Some(op),
            inputs: inputs.iter().map(|v| v.id).collect(),
            saved,
            requires_grad,
            name: None,
        }))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<GradientMap> {
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.id];
        if out_node.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "output must be scalar, got shape {:?}",
                out_node.value.shape()
            )));
        }
        if !out_node.requires_grad {
            return Err(Error::Backward(
                "output is detached: no leaf on its graph requires a gradient".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(op) = &node.op else { continue };
            let Some(dy) = grads[id].take() else { continue };
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &*nodes[i].value).collect();
            let input_grads = backward_op(op, &node.saved, &ins, &node.value, &dy, &wants)?;
            for ((&inp, g), want) in node.inputs.iter().zip(input_grads).zip(wants) {
                let (Some(g), true) = (g, want) else { continue };
                match &mut grads[inp] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut map = GradientMap::default();
        for (id, node) in nodes.iter().enumerate() {
            if node.op.is_some() || !node.requires_grad {
                continue;
            }
            let shape = node.value.shape().to_vec();
            let data = grads[id].take().unwrap_or_else(|| vec![0.0; numel(&shape)]);
            check_finite(&data).map_err(|e| Error::Backward(format!("gradient: {e}")))?;
            map.grads.insert(id, Tensor::from_parts(shape, data));
            if let Some(name) = &node.name {
                map.names.insert(name.clone(), id);
            }
        }
        Ok(map)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Snapshot of the recorded value.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    /// Batch mean and biased variance computed by a train-mode batchnorm node.
    pub fn batch_stats(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.tape.nodes.borrow()[self.id].saved {
            Saved::BatchNorm {
                mean,
                var,
                train: true,
                ..
            } => Some((mean.clone(), var.clone())),
            _ => None,
        }
    }

    fn unary(self, op: Primitive) -> Result<Var<'t>> {
        self.tape.apply(op, &[self])
    }

    pub fn conv2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.tape
            .apply(Primitive::Conv2d { stride, pad }, &[self, kernel])
    }

    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
        mode: BatchNormMode,
    ) -> Result<Var<'t>> {
        self.tape
            .apply(Primitive::BatchNorm2d { eps, mode }, &[self, gamma, beta])
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary(Primitive::Silu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sigmoid)
    }

    pub fn max_pool2d(self, k: usize, stride: usize) -> Result<Var<'t>> {
        self.unary(Primitive::MaxPool2d { k, stride })
    }

    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        self.unary(Primitive::UpsampleNearest { factor })
    }

    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        first.tape.apply(Primitive::ConcatChannels, parts)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Add, &[self, other])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Sub, &[self, other])
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::Mul, &[self, other])
    }

    pub fn mul_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary(Primitive::MulScalar(s))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary(Primitive::AddScalar(s))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sum)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Primitive::SqrtElem)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Primitive::Square)
    }

    pub fn channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Primitive::ChannelBias, &[self, bias])
    }

    pub fn gather(self, indices: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Primitive::Gather {
            indices,
            shape: shape.to_vec(),
        })
    }

    pub fn add_const(self, c: Tensor) -> Result<Var<'t>> {
        self.unary(Primitive::AddConst(Rc::new(c)))
    }

    pub fn mul_const(self, c: Tensor) -> Result<Var<'t>> {
        self.unary(Primitive::MulConst(Rc::new(c)))
    }

    /// `self - c` for a constant tensor `c`.
    pub fn sub_const(self, c: &[f64]) -> Result<Var<'t>> {
        let shape = self.shape();
        let neg = Tensor::new(&shape, c.iter().map(|v| -v).collect(), false)?;
        self.add_const(neg)
    }
}

fn expect_arity(op: &Primitive, vals: &[Rc<Tensor>], n: usize) -> Result<()> {
    if vals.len() != n {
        return Err(Error::shape(
            op.name(),
            format!("expects {n} inputs, got {}", vals.len()),
        ));
    }
    Ok(())
}

fn same_shape(op: &Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op.name(),
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn nchw(op: &Primitive, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(
            op.name(),
            format!("expected N×C×H×W, got {:?}", t.shape()),
        )),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn forward(op: &Primitive, vals: &[Rc<Tensor>]) -> Result<(Tensor, Saved)> {
    let unary = |n| expect_arity(op, vals, n);
    Ok(match op {
        Primitive::Conv2d { stride, pad } => {
            unary(2)?;
            let g = ConvGeom::new(vals[0].shape(), vals[1].shape(), *stride, *pad)
                .map_err(|d| Error::shape("conv2d", d))?;
            let out = kernels::conv2d_forward(vals[0].data(), vals[1].data(), &g);
            (
                Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], out),
                Saved::Conv(g),
            )
        }
        Primitive::BatchNorm2d { eps, mode } => {
            unary(3)?;
            let (n, c, h, w) = nchw(op, &vals[0])?;
            if vals[1].shape() != [c] || vals[2].shape() != [c] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!(
                        "gamma/beta must have shape [{c}], got {:?}/{:?}",
                        vals[1].shape(),
                        vals[2].shape()
                    ),
                ));
            }
            if *eps <= 0.0 {
                return Err(Error::InvalidArgument("batchnorm eps must be > 0".into()));
            }
            let hw = h * w;
            let (mean, var, train) = match mode {
                BatchNormMode::Train => {
                    if n * hw == 0 {
                        return Err(Error::shape("batchnorm2d", "empty batch"));
                    }
                    let (m, v) = kernels::channel_stats(vals[0].data(), n, c, hw);
                    (m, v, true)
                }
                BatchNormMode::Eval { mean, var } => {
                    if mean.len() != c || var.len() != c {
                        return Err(Error::shape("batchnorm2d", "running stats length != C"));
                    }
                    (mean.clone(), var.clone(), false)
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let x = vals[0].data();
            let (gamma, beta) = (vals[1].data(), vals[2].data());
            let mut xhat = vec![0.0; x.len()];
            let mut out = vec![0.0; x.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                        out[i] = gamma[ch] * xhat[i] + beta[ch];
                    }
                }
            }
            (
                Tensor::from_parts(vals[0].shape().to_vec(), out),
                Saved::BatchNorm {
                    xhat,
                    inv_std,
                    mean,
                    var,
                    train,
                },
            )
        }
        Primitive::Silu => {
            unary(1)?;
            (map(&vals[0], |x| x * sigmoid(x)), Saved::None)
        }
        Primitive::Sigmoid => {
            unary(1)?;
            (map(&vals[0], sigmoid), Saved::None)
        }
        Primitive::MaxPool2d { k, stride } => {
            unary(1)?;
            let (n, c, h, w) = nchw(op, &vals[0])?;
            if *k == 0 || *stride == 0 || *k > h || *k > w {
                return Err(Error::shape(
                    "maxpool2d",
                    format!("window {k} stride {stride} on {h}×{w}"),
                ));
            }
            let (out, arg, oh, ow) = kernels::maxpool_forward(vals[0].data(), n, c, h, w, *k, *stride);
            (
                Tensor::from_parts(vec![n, c, oh, ow], out),
                Saved::MaxPool(arg),
            )
        }
        Primitive::UpsampleNearest { factor } => {
            unary(1)?;
            if *factor < 1 {
                return Err(Error::InvalidArgument(format!(
                    "upsample factor must be >= 1, got {factor}"
                )));
            }
            let (n, c, h, w) = nchw(op, &vals[0])?;
            let out = kernels::upsample_nearest(vals[0].data(), n * c, h, w, *factor);
            (
                Tensor::from_parts(vec![n, c, h * factor, w * factor], out),
                Saved::None,
            )
        }
        Primitive::ConcatChannels => {
            if vals.is_empty() {
                return Err(Error::shape("concat_channels", "no inputs"));
            }
            let (n, _, h, w) = nchw(op, &vals[0])?;
            let mut chans = Vec::with_capacity(vals.len());
            for v in vals {
                let (vn, vc, vh, vw) = nchw(op, v)?;
                if (vn, vh, vw) != (n, h, w) {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("{:?} vs {:?}", v.shape(), vals[0].shape()),
                    ));
                }
                chans.push(vc);
            }
            let total: usize = chans.iter().sum();
            let hw = h * w;
            let mut out = Vec::with_capacity(n * total * hw);
            for b in 0..n {
                for (v, &c) in vals.iter().zip(&chans) {
                    out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
                }
            }
            (
                Tensor::from_parts(vec![n, total, h, w], out),
                Saved::Concat(chans),
            )
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            unary(2)?;
            same_shape(op, &vals[0], &vals[1])?;
            let f: fn(f64, f64) -> f64 = match op {
                Primitive::Add => |a, b| a + b,
                Primitive::Sub => |a, b| a - b,
                _ => |a, b| a * b,
            };
            (zip_map(&vals[0], &vals[1], f), Saved::None)
        }
        Primitive::MulScalar(s) => {
            unary(1)?;
            (map(&vals[0], |x| x * s), Saved::None)
        }
        Primitive::AddScalar(s) => {
            unary(1)?;
            (map(&vals[0], |x| x + s), Saved::None)
        }
        Primitive::Sum => {
            unary(1)?;
            (Tensor::scalar(vals[0].data().iter().sum()), Saved::None)
        }
        Primitive::SqrtElem => {
            unary(1)?;
            if let Some(v) = vals[0].data().iter().find(|&&v| v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "sqrt_elem of negative value {v}"
                )));
            }
            (map(&vals[0], f64::sqrt), Saved::None)
        }
        Primitive::Square => {
            unary(1)?;
            (map(&vals[0], |x| x * x), Saved::None)
        }
        Primitive::ChannelBias => {
            unary(2)?;
            let (n, c, h, w) = nchw(op, &vals[0])?;
            if vals[1].shape() != [c] {
                return Err(Error::shape(
                    "channel_bias",
                    format!("bias {:?} for {c} channels", vals[1].shape()),
                ));
            }
            let hw = h * w;
            let mut out = vals[0].data().to_vec();
            for b in 0..n {
                for ch in 0..c {
                    let bias = vals[1].data()[ch];
                    out[(b * c + ch) * hw..][..hw].iter_mut().for_each(|v| *v += bias);
                }
            }
            (Tensor::from_parts(vals[0].shape().to_vec(), out), Saved::None)
        }
        Primitive::Gather { indices, shape } => {
            unary(1)?;
            if numel(shape) != indices.len() {
                return Err(Error::shape(
                    "gather",
                    format!("{} indices for shape {shape:?}", indices.len()),
                ));
            }
            let src = vals[0].data();
            let mut out = Vec::with_capacity(indices.len());
            for &i in indices {
                out.push(*src.get(i).ok_or_else(|| {
                    Error::shape("gather", format!("index {i} out of range {}", src.len()))
                })?);
            }
            (Tensor::from_parts(shape.clone(), out), Saved::None)
        }
        Primitive::AddConst(c) | Primitive::MulConst(c) => {
            unary(1)?;
            same_shape(op, &vals[0], c)?;
            let f: fn(f64, f64) -> f64 = match op {
                Primitive::AddConst(_) => |a, b| a + b,
                _ => |a, b| a * b,
            };
            (zip_map(&vals[0], c, f), Saved::None)
        }
    })
}

/// Vector-Jacobian products. Returns one optional gradient per input.
fn backward_op(
    op: &Primitive,
    saved: &Saved,
    ins: &[&Tensor],
    out: &Tensor,
    dy: &[f64],
    wants: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..dy.len()).map(f).collect() };
    Ok(match (op, saved) {
        (Primitive::Conv2d { .. }, Saved::Conv(g)) => {
            let (dx, dk) =
                kernels::conv2d_backward(ins[0].data(), ins[1].data(), dy, g, wants[0], wants[1]);
            vec![dx, dk]
        }
        (
            Primitive::BatchNorm2d { .. },
            Saved::BatchNorm {
                xhat,
                inv_std,
                train,
                ..
            },
        ) => {
            let (n, c, h, w) = nchw(op, ins[0])?;
            let hw = h * w;
            let m = (n * hw) as f64;
            let gamma = ins[1].data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        dgamma[ch] += dy[i] * xhat[i];
                        dbeta[ch] += dy[i];
                    }
                }
            }
            let dx = wants[0].then(|| {
                let mut dx = vec![0.0; dy.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let scale = gamma[ch] * inv_std[ch];
                        for i in base..base + hw {
                            dx[i] = if *train {
                                scale / m * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                            } else {
                                scale * dy[i]
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        }
        (Primitive::Silu, _) => {
            let x = ins[0].data();
            vec![Some(elementwise(&|i| {
                let s = sigmoid(x[i]);
                dy[i] * s * (1.0 + x[i] * (1.0 - s))
            }))]
        }
        (Primitive::Sigmoid, _) => {
            let s = out.data();
            vec![Some(elementwise(&|i| dy[i] * s[i] * (1.0 - s[i])))]
        }
        (Primitive::MaxPool2d { .. }, Saved::MaxPool(arg)) => {
            let mut dx = vec![0.0; ins[0].numel()];
            for (g, &i) in dy.iter().zip(arg) {
                dx[i] += g;
            }
            vec![Some(dx)]
        }
        (Primitive::UpsampleNearest { factor }, _) => {
            let (n, c, h, w) = nchw(op, ins[0])?;
            vec![Some(kernels::upsample_nearest_backward(dy, n * c, h, w, *factor))]
        }
        (Primitive::ConcatChannels, Saved::Concat(chans)) => {
            let (n, _, h, w) = nchw(op, ins[0])?;
            let hw = h * w;
            let total: usize = chans.iter().sum();
            let mut grads: Vec<Vec<f64>> = chans.iter().map(|c| Vec::with_capacity(n * c * hw)).collect();
            for b in 0..n {
                let mut off = b * total * hw;
                for (g, &c) in grads.iter_mut().zip(chans) {
                    g.extend_from_slice(&dy[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads.into_iter().map(Some).collect()
        }
        (Primitive::Add, _) => vec![Some(dy.to_vec()), Some(dy.to_vec())],
        (Primitive::Sub, _) => vec![Some(dy.to_vec()), Some(dy.iter().map(|g| -g).collect())],
        (Primitive::Mul, _) => {
            let (a, b) = (ins[0].data(), ins[1].data());
            vec![
                Some(elementwise(&|i| dy[i] * b[i])),
                Some(elementwise(&|i| dy[i] * a[i])),
            ]
        }
        (Primitive::MulScalar(s), _) => vec![Some(dy.iter().map(|g| g * s).collect())],
        (Primitive::AddScalar(_) | Primitive::AddConst(_), _) => vec![Some(dy.to_vec())],
        (Primitive::MulConst(c), _) => {
            let c = c.data();
            vec![Some(elementwise(&|i| dy[i] * c[i]))]
        }
        (Primitive::Sum, _) => vec![Some(vec![dy[0]; ins[0].numel()])],
        (Primitive::SqrtElem, _) => {
            let s = out.data();
            vec![Some(elementwise(&|i| dy[i] * 0.5 / s[i]))]
        }
        (Primitive::Square, _) => {
            let x = ins[0].data();
            vec![Some(elementwise(&|i| 2.0 * x[i] * dy[i]))]
        }
        (Primitive::ChannelBias, _) => {
            let (n, c, h, w) = nchw(op, ins[0])?;
            let hw = h * w;
            let mut db = vec![0.0; c];
            for b in 0..n {
                for (ch, acc) in db.iter_mut().enumerate() {
                    *acc += dy[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
                }
            }
            vec![Some(dy.to_vec()), Some(db)]
        }
        (Primitive::Gather { indices, .. }, _) => {
            let mut dx = vec![0.0; ins[0].numel()];
            for (g, &i) in dy.iter().zip(indices) {
                dx[i] += g;
            }
            vec![Some(dx)]
        }
        _ => {
            return Err(Error::Backward(format!(
                "missing saved state for {}",
                op.name()
            )))
        }
    })
}
