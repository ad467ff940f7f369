//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records operations in insertion order; [`Graph::backward`]
//! walks the tape once in reverse, accumulating gradients additively into
//! every input of every node. Only leaves created with `requires_grad`
//! keep their gradient after the pass.

mod conv;
mod conv_fast;
mod gemm;
mod norm;
mod sample;

pub use conv::{
    conv3d_backward, conv3d_backward_generic, conv3d_forward, conv3d_forward_generic, conv_transpose3d_forward,
    Conv3dOptions,
};
pub use norm::NORM_EPS;
pub use sample::{grid_sample_forward, max_pool2_forward, upsample_forward};

use crate::error::{shape_err, Error, Result};
use crate::ssm::scan::{scan_backward, scan_forward, ScanInputs, ScanStrategy};
use crate::tensor::Tensor;
use norm::{NormLayout, NormSaved};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    /// Normalise each (sample, group) over `C/groups` channels and all spatial positions.
    Group(usize),
    /// Normalise each row of the trailing axis.
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Add,
    Hadamard,
    /// Concatenate along axis 1 (channels).
    Concat,
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp: Send + Sync {
    /// Gradient with respect to each input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Silu(Var),
    PowScalar(Var, f64),
    Sum(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    ScaleLast(Var, Var),
    Linear(Var, Var, Option<Var>),
    Conv3d(Var, Var, Option<Var>, Conv3dOptions),
    ConvTranspose3d(Var, Var, Option<Var>),
    Norm(Var, Var, Var, NormLayout, NormSaved),
    GridSample(Var, Var),
    Upsample2(Var),
    MaxPool2(Var, Vec<usize>),
    CumulateOffsets(Var, OffsetLayout),
    Scan(ScanOperands),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct OffsetLayout {
    pub axis: usize,
    pub half: usize,
}

struct ScanOperands {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Option<Var>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, "shape", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Applies `perm` to a row-major tensor: output axis `i` is input axis `perm[i]`.
fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let in_strides = t.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let data = t.data();
    loop {
        let base: usize = idx[..rank - 1].iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|k| data[base + k * inner_stride]));
        }
        // advance all but the last axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return Tensor::new(out_shape, out).expect("shape");
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index of the first recorded value containing NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.value.data().iter().any(|v| !v.is_finite()))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a leaf; gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("hadamard", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = map(self.value(a), |x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = map(self.value(a), |x| x * s);
        self.push(v, Op::MulScalar(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = map(self.value(a), sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = map(self.value(a), softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    /// `x^p` for a constant exponent; inputs must be nonnegative when `p` is fractional.
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let v = map(self.value(a), |x| x.powf(p));
        self.push(v, Op::PowScalar(a, p), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => {
                let v = map(self.value(a), |x| x.max(0.0));
                self.push(v, Op::Relu(a), &[a])
            }
            Activation::Silu => {
                let v = map(self.value(a), |x| x * sigmoid(x));
                self.push(v, Op::Silu(a), &[a])
            }
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Silu)
    }

    pub fn combine(&mut self, a: Var, b: Var, kind: Combine) -> Result<Var> {
        match kind {
            Combine::Add => self.add(a, b),
            Combine::Hadamard => self.mul(a, b),
            Combine::Concat => self.concat(&[a, b], 1),
        }
    }

    // ---- reductions & layout ----

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", "perm", format!("{perm:?} for rank {rank}")));
        }
        let v = permute_data(self.value(a), perm);
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", "axis", format!("{axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("axis != {axis}"),
                    format!("{s:?} vs {first:?}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// `x[..., c] * s[c]`.
    pub fn scale_last(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(s) != [c] {
            return Err(shape_err("scale", "channels", format!("{:?} vs {c}", self.shape(s))));
        }
        let sv = self.value(s).data().to_vec();
        let xv = self.value(x);
        let v = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().enumerate().map(|(i, v)| v * sv[i % c]).collect(),
        )?;
        Ok(self.push(v, Op::ScaleLast(x, s), &[x, s]))
    }

    // ---- layers ----

    /// Affine map over the trailing axis: `x @ w^T + b`, `w: [Cout, Cin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().ok_or_else(|| shape_err("linear", "rank", "scalar input"))?;
        if ws.len() != 2 || ws[1] != cin {
            return Err(shape_err("linear", "Cin", format!("input {xs:?}, weight {ws:?}")));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("linear", "bias", format!("{:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / cin;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bd = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; rows * cout];
        for r in 0..rows {
            let xr = &xd[r * cin..][..cin];
            for o in 0..cout {
                let wr = &wd[o * cin..][..cin];
                let mut acc = bd.map_or(0.0, |b| b[o]);
                for k in 0..cin {
                    acc += xr[k] * wr[k];
                }
                out[r * cout + o] = acc;
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("rank") = cout;
        let v = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Linear(x, w, b), &inputs))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv3dOptions) -> Result<Var> {
        let v = conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), opts)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv3d(x, w, b, opts), &inputs))
    }

    /// Depthwise 3D convolution (`groups = C`) with `same` padding for odd kernels.
    pub fn dwconv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[0] != c || ws[1] != 1 {
            return Err(shape_err("dwconv3d", "weight", format!("{ws:?} for {c} channels")));
        }
        let opts = Conv3dOptions {
            padding: [ws[2] / 2, ws[3] / 2, ws[4] / 2],
            groups: c,
            ..Conv3dOptions::default()
        };
        self.conv3d(x, w, b, opts)
    }

    /// Transposed convolution with kernel equal to stride; `w: [Cin, Cout, k, k, k]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = conv_transpose3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::ConvTranspose3d(x, w, b), &inputs))
    }

    pub fn normalize(&mut self, x: Var, kind: Norm, gain: Var, bias: Var) -> Result<Var> {
        let layout = match kind {
            Norm::Group(groups) => NormLayout::group(self.shape(x), groups)?,
            Norm::Layer => NormLayout::layer(self.shape(x))?,
        };
        let op = if matches!(kind, Norm::Layer) {
            "layer_norm"
        } else {
            "group_norm"
        };
        norm::check_affine(op, &layout, self.value(gain), self.value(bias))?;
        let (v, saved) = norm::norm_forward(self.value(x), self.value(gain), self.value(bias), layout);
        Ok(self.push(v, Op::Norm(x, gain, bias, layout, saved), &[x, gain, bias]))
    }

    pub fn grid_sample_trilinear(&mut self, x: Var, coords: Var) -> Result<Var> {
        let v = grid_sample_forward(self.value(x), self.value(coords))?;
        Ok(self.push(v, Op::GridSample(x, coords), &[x, coords]))
    }

    pub fn upsample_trilinear(&mut self, x: Var) -> Result<Var> {
        let v = upsample_forward(self.value(x))?;
        Ok(self.push(v, Op::Upsample2(x), &[x]))
    }

    pub fn pool_max3d(&mut self, x: Var) -> Result<Var> {
        let (v, arg) = max_pool2_forward(self.value(x))?;
        Ok(self.push(v, Op::MaxPool2(x, arg), &[x]))
    }

    pub(crate) fn cumulate_offsets_op(&mut self, raw: Var, value: Tensor, layout: OffsetLayout) -> Var {
        self.push(value, Op::CumulateOffsets(raw, layout), &[raw])
    }

    /// Selective scan; see [`crate::ssm::scan`] for operand layout.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Option<Var>,
        strategy: ScanStrategy,
    ) -> Result<Var> {
        let val = |v: Var| {
            let t = &self.nodes[v.0].value;
            (t.shape(), t.data())
        };
        let inputs = ScanInputs::new(val(u), val(delta), val(a), val(b), val(c), d.map(val))?;
        let y = scan_forward(&inputs, strategy);
        let v = Tensor::new(self.shape(u).to_vec(), y)?;
        let mut ins = vec![u, delta, a, b, c];
        ins.extend(d);
        Ok(self.push(v, Op::Scan(ScanOperands { u, delta, a, b, c, d }), &ins))
    }

    /// Records an operation with caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), op), inputs)
    }

    // ---- backward ----

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gin) in self.node_backward(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gin.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gin),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map(g, |x| -x))],
            Op::Mul(a, b) => vec![(*a, zip(g, val(*b), |g, y| g * y)), (*b, zip(g, val(*a), |g, x| g * x))],
            Op::Div(a, b) => {
                let ga = zip(g, val(*b), |g, y| g / y);
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(val(*a).data())
                        .zip(val(*b).data())
                        .map(|((g, x), y)| -g * x / (y * y))
                        .collect(),
                )
                .expect("shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                vec![(*a, g.clone().reshaped(shape).expect("numel"))]
            }
            Op::MulScalar(a, s) => vec![(*a, map(g, |x| x * s))],
            Op::Exp(a) => vec![(*a, zip(g, out, |g, y| g * y))],
            Op::Log(a) => vec![(*a, zip(g, val(*a), |g, x| g / x))],
            Op::Sigmoid(a) => vec![(*a, zip(g, out, |g, y| g * y * (1.0 - y)))],
            Op::Tanh(a) => vec![(*a, zip(g, out, |g, y| g * (1.0 - y * y)))],
            Op::Softplus(a) => vec![(*a, zip(g, val(*a), |g, x| g * sigmoid(x)))],
            Op::Relu(a) => vec![(*a, zip(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Silu(a) => vec![(
                *a,
                zip(g, val(*a), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                }),
            )],
            Op::PowScalar(a, p) => vec![(
                *a,
                zip(g, val(*a), |g, x| if *p == 0.0 { 0.0 } else { g * p * x.powf(p - 1.0) }),
            )],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0]))],
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*a, permute_data(g, &inv))]
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let t = val(p);
                        let chunk = t.shape()[*axis] * inner;
                        let mut d = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * total + offset..][..chunk]);
                        }
                        offset += chunk;
                        (p, Tensor::new(t.shape().to_vec(), d).expect("shape"))
                    })
                    .collect()
            }
            Op::ScaleLast(x, s) => {
                let sv = val(*s).data();
                let c = sv.len();
                let gx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().enumerate().map(|(i, g)| g * sv[i % c]).collect(),
                )
                .expect("shape");
                let mut gs = vec![0.0; c];
                for (i, (g, x)) in g.data().iter().zip(val(*x).data()).enumerate() {
                    gs[i % c] += g * x;
                }
                vec![(*x, gx), (*s, Tensor::new([c], gs).expect("shape"))]
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (val(*x), val(*w));
                let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / cin;
                let mut res = Vec::new();
                if need(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        let gr = &g.data()[r * cout..][..cout];
                        let out = &mut gx[r * cin..][..cin];
                        for (o, &gv) in gr.iter().enumerate() {
                            let wr = &wv.data()[o * cin..][..cin];
                            for k in 0..cin {
                                out[k] += gv * wr[k];
                            }
                        }
                    }
                    res.push((*x, Tensor::new(xv.shape().to_vec(), gx).expect("shape")));
                }
                if need(*w) {
                    let mut gw = vec![0.0; wv.len()];
                    for r in 0..rows {
                        let xr = &xv.data()[r * cin..][..cin];
                        for o in 0..cout {
                            let gv = g.data()[r * cout + o];
                            let out = &mut gw[o * cin..][..cin];
                            for k in 0..cin {
                                out[k] += gv * xr[k];
                            }
                        }
                    }
                    res.push((*w, Tensor::new(wv.shape().to_vec(), gw).expect("shape")));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; cout];
                    for r in 0..rows {
                        for o in 0..cout {
                            gb[o] += g.data()[r * cout + o];
                        }
                    }
                    res.push((*b, Tensor::new([cout], gb).expect("shape")));
                }
                res
            }
            Op::Conv3d(x, w, b, opts) => {
                let wants = [need(*x), need(*w), b.is_some_and(need)];
                let (gx, gw, gb) = conv3d_backward(val(*x), val(*w), g, *opts, wants).expect("validated in forward");
                let mut res = Vec::new();
                res.extend(gx.map(|t| (*x, t)));
                res.extend(gw.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, gb) {
                    res.push((*b, t));
                }
                res
            }
            Op::ConvTranspose3d(x, w, b) => {
                let (gx, gw, gb) = conv::conv_transpose3d_backward(val(*x), val(*w), g);
                let mut res = vec![(*x, gx), (*w, gw)];
                res.extend(b.map(|b| (b, gb)));
                res
            }
            Op::Norm(x, gain, bias, layout, saved) => {
                let (gx, gg, gb) = norm::norm_backward(val(*x), val(*gain), g, *layout, saved);
                vec![(*x, gx), (*gain, gg), (*bias, gb)]
            }
            Op::GridSample(x, c) => {
                let (gx, gc) = sample::grid_sample_backward(val(*x), val(*c), g, [need(*x), need(*c)]);
                let mut res = Vec::new();
                res.extend(gx.map(|t| (*x, t)));
                res.extend(gc.map(|t| (*c, t)));
                res
            }
            Op::Upsample2(x) => vec![(*x, sample::upsample_backward(g))],
            Op::MaxPool2(x, arg) => {
                let mut gx = vec![0.0; val(*x).len()];
                for (o, &src) in arg.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), gx).expect("shape"))]
            }
            Op::CumulateOffsets(raw, layout) => {
                vec![(
                    *raw,
                    crate::snake::cumulate_offsets_backward(val(*raw).shape(), g, *layout),
                )]
            }
            Op::Scan(ops) => {
                let v = |x: Var| {
                    let t = val(x);
                    (t.shape(), t.data())
                };
                let inputs = ScanInputs::new(v(ops.u), v(ops.delta), v(ops.a), v(ops.b), v(ops.c), ops.d.map(v))
                    .expect("validated in forward");
                let sg = scan_backward(&inputs, g.data());
                let t = |x: Var, d: Vec<f64>| (x, Tensor::new(val(x).shape().to_vec(), d).expect("shape"));
                let mut res = vec![
                    t(ops.u, sg.u),
                    t(ops.delta, sg.delta),
                    t(ops.a, sg.a),
                    t(ops.b, sg.b),
                    t(ops.c, sg.c),
                ];
                res.extend(ops.d.map(|d| t(d, sg.d)));
                res
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                inputs.iter().copied().zip(op.backward(&ins, out, g)).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests;
