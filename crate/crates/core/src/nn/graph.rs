//! Tape-recorded reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. Gradients are only propagated along paths that
//! reach a leaf created with `requires_grad`, and only leaves keep
//! accumulated gradients.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, PadMode};
use super::params::ParamTree;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::gradops;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    UpsampleNearest {
        input: Var,
        factor: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        input: Var,
        factor: f64,
    },
    AddScalar {
        input: Var,
    },
    SubScalarVar {
        input: Var,
        scalar: Var,
    },
    Abs {
        input: Var,
    },
    Softplus {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    GradientMagnitude {
        input: Var,
        epsilon: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward/backward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: HashMap<usize, Tensor>,
    bound: HashMap<String, Var>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(existing) => add_into(existing.data_mut(), grad.data()),
        None => *slot = Some(grad),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf; gradients accumulate on it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds parameter `name` of `tree` as a leaf. A name is bound once per
    /// graph; later calls return the same node.
    pub fn param(&mut self, tree: &ParamTree, name: &str, trainable: bool) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = tree
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?
            .clone();
        let v = self.leaf(value, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Gradients of every trainable bound parameter, zero where none arrived.
    pub fn param_grads(&self) -> ParamTree {
        let mut out = ParamTree::new();
        for (name, &v) in &self.bound {
            if !self.rg(v) {
                continue;
            }
            let g = self
                .grads
                .get(&v.0)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin || kh != kw {
            return Err(shape_err(
                "conv2d input/weight",
                self.value(input).shape(),
                self.value(weight).shape(),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv2d bias", self.value(b).shape(), &[cout]));
            }
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!("conv2d stride {stride}")));
        }
        let geom = ConvGeom::new(cin, h, w, kh, stride, padding, mode)
            .ok_or_else(|| Error::Shape(format!("{h}x{w} input too small for {kh}x{kh} kernel")))?;
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            n,
            &geom,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            cout,
        );
        let value = Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v * slope })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::LeakyRelu { input, slope }, rg)
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor 0".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(input).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
            for oy in 0..oh {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                    *d = row[ox / factor];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::UpsampleNearest { input, factor }, rg))
    }

    /// Fully connected layer: `input` is `N × …` (flattened per item),
    /// `weight` is `out × features`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| Error::Shape("dense on rank-0".into()))?;
        let features = x.numel() / n.max(1);
        let wshape = self.value(weight).shape();
        if wshape.len() != 2 || wshape[1] != features {
            return Err(shape_err("dense input/weight", x.shape(), wshape));
        }
        let outf = wshape[0];
        if let Some(b) = bias {
            if self.value(b).shape() != [outf] {
                return Err(shape_err("dense bias", self.value(b).shape(), &[outf]));
            }
        }
        let mut out = vec![0.0; n * outf];
        if let Some(b) = bias {
            for row in out.chunks_exact_mut(outf) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(
            n,
            features,
            outf,
            1.0,
            x.data(),
            features,
            1,
            self.value(weight).data(),
            1,
            features,
            beta,
            &mut out,
            outf,
            1,
        );
        let value = Tensor::new(vec![n, outf], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err(
                    "concat",
                    self.value(first).shape(),
                    self.value(v).shape(),
                ));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &v in inputs {
                let c = self.value(v).shape()[1];
                out.extend_from_slice(&self.value(v).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} of {c}",
                start + len
            )));
        }
        let hw = h * w;
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&src[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let value = Tensor::new(vec![n, len, h, w], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::SliceChannels { input, start }, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(what, x.shape(), y.shape()));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(input);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.unary(input, |v| v * factor);
        let rg = self.rg(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn add_scalar(&mut self, input: Var, c: f64) -> Var {
        let value = self.unary(input, |v| v + c);
        let rg = self.rg(input);
        self.push(value, Op::AddScalar { input }, rg)
    }

    /// `input - scalar` with a one-element `scalar` broadcast over `input`.
    pub fn sub_scalar(&mut self, input: Var, scalar: Var) -> Result<Var> {
        let s = self.scalar(scalar)?;
        let value = self.unary(input, |v| v - s);
        let rg = self.rg(input) || self.rg(scalar);
        Ok(self.push(value, Op::SubScalarVar { input, scalar }, rg))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let value = self.unary(input, f64::abs);
        let rg = self.rg(input);
        self.push(value, Op::Abs { input }, rg)
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, input: Var) -> Var {
        let value = self.unary(input, softplus);
        let rg = self.rg(input);
        self.push(value, Op::Softplus { input }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.numel() == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let m = x.data().iter().sum::<f64>() / x.numel() as f64;
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(m), Op::Mean { input }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Per-channel gradient magnitude of an NCHW batch.
    pub fn gradient_magnitude(&mut self, input: Var, epsilon: f64) -> Result<Var> {
        let (_, _, h, w) = self.value(input).dims4()?;
        if h < 3 || w < 3 {
            return Err(Error::InvalidArgument(format!(
                "gradient map needs at least 3x3 pixels, got {h}x{w}"
            )));
        }
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon}")));
        }
        let x = self.value(input);
        let mut out = vec![0.0; x.numel()];
        for (src, dst) in x
            .data()
            .chunks_exact(h * w)
            .zip(out.chunks_exact_mut(h * w))
        {
            gradops::gradient_magnitude_plane(src, h, w, epsilon, dst);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::GradientMagnitude { input, epsilon }, rg))
    }

    /// Back-propagates from the scalar `loss`, adding into the gradients of
    /// every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, g, &mut pending)?;
        }
        Ok(())
    }

    fn send(&self, pending: &mut [Option<Tensor>], v: Var, grad: Tensor) {
        if self.rg(v) {
            accumulate(&mut pending[v.0], grad);
        }
    }

    fn backward_node(&mut self, i: usize, g: Tensor, pending: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                let slot = self.grads.remove(&i);
                let mut slot = slot;
                accumulate(&mut slot, g);
                self.grads.insert(i, slot.expect("just set"));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (input, weight, bias, geom) = (*input, *weight, *bias, *geom);
                let x = self.value(input);
                let wt = self.value(weight);
                let batch = x.shape()[0];
                let cout = wt.shape()[0];
                let mut dx = self.rg(input).then(|| Tensor::zeros(x.shape()));
                let mut dw = self.rg(weight).then(|| Tensor::zeros(wt.shape()));
                let mut db = bias.filter(|&b| self.rg(b)).map(|_| Tensor::zeros(&[cout]));
                kernels::conv2d_backward(
                    x.data(),
                    batch,
                    &geom,
                    wt.data(),
                    cout,
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    self.send(pending, input, dx);
                }
                if let Some(dw) = dw {
                    self.send(pending, weight, dw);
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    self.send(pending, b, db);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let (input, slope) = (*input, *slope);
                let x = self.value(input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { gv * slope })
                    .collect();
                let dx = Tensor::new(x.shape().to_vec(), data)?;
                self.send(pending, input, dx);
            }
            Op::UpsampleNearest { input, factor } => {
                let (input, factor) = (*input, *factor);
                let (n, c, h, w) = self.value(input).dims4()?;
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0; n * c * h * w];
                for (src, dst) in g
                    .data()
                    .chunks_exact(oh * ow)
                    .zip(dx.chunks_exact_mut(h * w))
                {
                    for oy in 0..oh {
                        let row = &mut dst[(oy / factor) * w..(oy / factor + 1) * w];
                        for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            row[ox / factor] += v;
                        }
                    }
                }
                let dx = Tensor::new(vec![n, c, h, w], dx)?;
                self.send(pending, input, dx);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let x = self.value(input);
                let wt = self.value(weight);
                let n = x.shape()[0];
                let features = wt.shape()[1];
                let outf = wt.shape()[0];
                if self.rg(input) {
                    let mut dx = vec![0.0; x.numel()];
                    kernels::gemm(
                        n,
                        outf,
                        features,
                        1.0,
                        g.data(),
                        outf,
                        1,
                        wt.data(),
                        features,
                        1,
                        0.0,
                        &mut dx,
                        features,
                        1,
                    );
                    let dx = Tensor::new(x.shape().to_vec(), dx)?;
                    self.send(pending, input, dx);
                }
                if self.rg(weight) {
                    let mut dw = vec![0.0; wt.numel()];
                    kernels::gemm(
                        outf,
                        n,
                        features,
                        1.0,
                        g.data(),
                        1,
                        outf,
                        x.data(),
                        features,
                        1,
                        0.0,
                        &mut dw,
                        features,
                        1,
                    );
                    let dw = Tensor::new(wt.shape().to_vec(), dw)?;
                    self.send(pending, weight, dw);
                }
                if let Some(b) = bias.filter(|&b| self.rg(b)) {
                    let mut db = vec![0.0; outf];
                    for row in g.data().chunks_exact(outf) {
                        add_into(&mut db, row);
                    }
                    self.send(pending, b, Tensor::new(vec![outf], db)?);
                }
            }
            Op::Concat { inputs } => {
                let inputs = inputs.clone();
                let (n, total_c, h, w) = g.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.rg(v) {
                        let mut part = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * total_c + offset) * hw;
                            part.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        let part = Tensor::new(vec![n, c, h, w], part)?;
                        self.send(pending, v, part);
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let (input, start) = (*input, *start);
                let (n, c, h, w) = self.value(input).dims4()?;
                let len = g.shape()[1];
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for b in 0..n {
                    dx[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                self.send(pending, input, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.send(pending, a, g.clone());
                self.send(pending, b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect())?;
                self.send(pending, a, g);
                self.send(pending, b, neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = self.binary_grad(&g, b, |gv, y| gv * y);
                let db = self.binary_grad(&g, a, |gv, x| gv * x);
                self.send(pending, a, da);
                self.send(pending, b, db);
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|v| v * factor).collect(),
                )?;
                self.send(pending, input, dx);
            }
            Op::AddScalar { input } => {
                let input = *input;
                self.send(pending, input, g);
            }
            Op::SubScalarVar { input, scalar } => {
                let (input, scalar) = (*input, *scalar);
                let total: f64 = g.data().iter().sum();
                let ds = Tensor::new(self.value(scalar).shape().to_vec(), vec![-total])?;
                self.send(pending, input, g);
                self.send(pending, scalar, ds);
            }
            Op::Abs { input } => {
                let input = *input;
                let dx = self.binary_grad(&g, input, |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.send(pending, input, dx);
            }
            Op::Softplus { input } => {
                let input = *input;
                let dx = self.binary_grad(&g, input, |gv, x| gv * sigmoid(x));
                self.send(pending, input, dx);
            }
            Op::Sum { input } => {
                let input = *input;
                let gv = g.item()?;
                let dx = Tensor::full(self.value(input).shape(), gv);
                self.send(pending, input, dx);
            }
            Op::Mean { input } => {
                let input = *input;
                let x = self.value(input);
                let dx = Tensor::full(x.shape(), g.item()? / x.numel() as f64);
                self.send(pending, input, dx);
            }
            Op::Reshape { input } => {
                let input = *input;
                let dx = g.reshape(self.value(input).shape())?;
                self.send(pending, input, dx);
            }
            Op::GradientMagnitude { input, epsilon } => {
                let (input, epsilon) = (*input, *epsilon);
                let x = self.value(input);
                let (_, _, h, w) = x.dims4()?;
                let mut dx = vec![0.0; x.numel()];
                for ((src, up), dst) in x
                    .data()
                    .chunks_exact(h * w)
                    .zip(g.data().chunks_exact(h * w))
                    .zip(dx.chunks_exact_mut(h * w))
                {
                    gradops::gradient_magnitude_plane_backward(src, h, w, epsilon, up, dst);
                }
                let dx = Tensor::new(x.shape().to_vec(), dx)?;
                self.send(pending, input, dx);
            }
        }
        Ok(())
    }

    fn binary_grad(&self, g: &Tensor, other: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let o = self.value(other);
        let data = g
            .data()
            .iter()
            .zip(o.data())
            .map(|(&gv, &ov)| f(gv, ov))
            .collect();
        Tensor::new(g.shape().to_vec(), data).expect("same shape")
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
