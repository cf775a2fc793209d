//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Nodes are appended in evaluation order, so the record is always
//! topologically sorted and a single reverse sweep computes every gradient.
//! Parameters are borrowed from the network that owns them; only derived
//! values are allocated.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug)]
enum Leaf {
    Input,
    Param(usize),
    Constant,
}

#[derive(Debug)]
enum Op {
    Leaf(Leaf),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeometry, cols: Vec<f64> },
    LeakyRelu { x: NodeId, slope: f64 },
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSigmoid(NodeId),
    Softplus(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Reshape(NodeId),
    SliceRows { x: NodeId, start: usize },
    Gather { x: NodeId, index: Vec<usize> },
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    param_shapes: Vec<Option<Vec<usize>>>,
    input: Option<Tensor>,
    input_registered: bool,
}

impl Gradients {
    /// Gradient for every registered parameter, in parameter-index order.
    /// Parameters the loss does not depend on get zeros.
    pub fn params(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(&self.param_shapes)
            .map(|(g, shape)| match (g, shape) {
                (Some(g), _) => g.clone(),
                (None, Some(shape)) => Tensor::zeros(shape),
                (None, None) => Tensor::scalar(0.0),
            })
            .collect()
    }

    pub fn into_params(self) -> Vec<Tensor> {
        let shapes = self.param_shapes;
        self.params
            .into_iter()
            .zip(shapes)
            .map(|(g, shape)| match (g, shape) {
                (Some(g), _) => g,
                (None, Some(shape)) => Tensor::zeros(&shape),
                (None, None) => Tensor::scalar(0.0),
            })
            .collect()
    }

    pub fn input(&self) -> Result<&Tensor> {
        if !self.input_registered {
            return Err(Error::InputNotRegistered);
        }
        self.input.as_ref().ok_or(Error::InputNotRegistered)
    }

    pub fn into_input(self) -> Result<Tensor> {
        if !self.input_registered {
            return Err(Error::InputNotRegistered);
        }
        self.input.ok_or(Error::InputNotRegistered)
    }
}

#[derive(Debug)]
pub struct ComputationRecord<'a> {
    nodes: Vec<Node<'a>>,
    track_params: bool,
    input: Option<NodeId>,
}

impl Default for ComputationRecord<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> ComputationRecord<'a> {
    /// A record that differentiates with respect to parameters (and the input,
    /// when one is registered).
    pub fn new() -> Self {
        ComputationRecord { nodes: Vec::new(), track_params: true, input: None }
    }

    /// A record that treats parameters as constants. Used when only the input
    /// gradient is wanted, which skips the weight-gradient products.
    pub fn input_only() -> Self {
        ComputationRecord { nodes: Vec::new(), track_params: false, input: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value: Cow::Owned(value), needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Registers the differentiable input. Only one input per record.
    pub fn input(&mut self, x: Tensor) -> NodeId {
        assert!(self.input.is_none(), "record already has a differentiable input");
        let id = self.push(Op::Leaf(Leaf::Input), x, true);
        self.input = Some(id);
        id
    }

    /// Registers a borrowed parameter under a caller-chosen index.
    pub fn param(&mut self, index: usize, value: &'a Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf(Leaf::Param(index)),
            value: Cow::Borrowed(value),
            needs_grad: self.track_params,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf(Leaf::Constant), value, false)
    }

    /// `x [B, in] · wᵀ + b` with `w [out, in]`, `b [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::Shape(format!(
                "affine expects x[B,in], w[out,in], b[out]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; batch * out];
        gemm(batch, inp, out, self.value(x).data(), false, self.value(w).data(), true, &mut y, false);
        let bias = self.value(b).data();
        for row in y.chunks_mut(out) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Op::Affine { x, w, b }, Tensor::from_parts(vec![batch, out], y), needs))
    }

    /// Cross-correlation of `x [B, C, H, W]` with `w [O, C, k, k]` plus `b [O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b));
        if xs.len() != 4
            || ws.len() != 4
            || bs.len() != 1
            || ws[1] != xs[1]
            || ws[2] != geom.kernel
            || ws[3] != geom.kernel
            || bs[0] != ws[0]
        {
            return Err(Error::Shape(format!(
                "conv expects x[B,C,H,W], w[O,C,{k},{k}], b[O]; got {xs:?}, {ws:?}, {bs:?}",
                k = geom.kernel
            )));
        }
        let (batch, chans, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let out_ch = ws[0];
        let (Some(oh), Some(ow)) = (geom.output_size(h), geom.output_size(wd)) else {
            return Err(Error::Shape(format!("input {h}x{wd} smaller than kernel {}", geom.kernel)));
        };
        let patch = chans * geom.kernel * geom.kernel;
        let positions = batch * oh * ow;
        let cols = im2col(self.value(x).data(), batch, chans, h, wd, oh, ow, geom);
        let mut out_mat = vec![0.0; out_ch * positions];
        gemm(out_ch, patch, positions, self.value(w).data(), false, &cols, false, &mut out_mat, false);
        let bias = self.value(b).data();
        let plane = oh * ow;
        let mut y = vec![0.0; batch * out_ch * plane];
        for o in 0..out_ch {
            for n in 0..batch {
                let src = &out_mat[o * positions + n * plane..o * positions + (n + 1) * plane];
                let dst = &mut y[(n * out_ch + o) * plane..(n * out_ch + o + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        let needs = self.needs(&[x, w, b]);
        let value = Tensor::from_parts(vec![batch, out_ch, oh, ow], y);
        Ok(self.push(Op::Conv2d { x, w, b, geom, cols }, value, needs))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let y = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let needs = self.needs(&[x]);
        self.push(Op::LeakyRelu { x, slope }, y, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(sigmoid);
        let needs = self.needs(&[x]);
        self.push(Op::Sigmoid(x), y, needs)
    }

    /// Row-wise softmax over the last axis of a `[B, K]` tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, k) = self.matrix_dims(x, "softmax")?;
        let mut y = self.value(x).data().to_vec();
        for row in y.chunks_mut(k) {
            softmax_in_place(row);
        }
        debug_assert_eq!(y.len(), rows * k);
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Softmax(x), Tensor::from_parts(vec![rows, k], y), needs))
    }

    /// Row-wise log-softmax, computed with the max-shift for stability.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, k) = self.matrix_dims(x, "log_softmax")?;
        let mut y = self.value(x).data().to_vec();
        for row in y.chunks_mut(k) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Op::LogSoftmax(x), Tensor::from_parts(vec![rows, k], y), needs))
    }

    /// `ln σ(x)` without forming σ(x).
    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| -softplus(-v));
        let needs = self.needs(&[x]);
        self.push(Op::LogSigmoid(x), y, needs)
    }

    /// `ln(1 + eˣ)`.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(softplus);
        let needs = self.needs(&[x]);
        self.push(Op::Softplus(x), y, needs)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.value(x).map(f64::ln);
        if !y.is_finite() {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Log(x), y, needs))
    }

    /// Sum of all elements, as a 0-dimensional tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let needs = self.needs(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let y: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(p, q)| p + q).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), Tensor::from_parts(shape, y), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let y: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(p, q)| p * q).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), Tensor::from_parts(shape, y), needs))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let y = self.value(x).map(|v| v * factor);
        let needs = self.needs(&[x]);
        self.push(Op::Scale(x, factor), y, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), y, needs))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return Err(Error::Shape(format!("rows {start}..{} of {shape:?}", start + len)));
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::SliceRows { x, start }, Tensor::from_parts(out_shape, data), needs))
    }

    /// Picks `x[b, index[b]]` from a `[B, K]` tensor, giving `[B]`.
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let (rows, k) = self.matrix_dims(x, "gather")?;
        if index.len() != rows || index.iter().any(|&i| i >= k) {
            return Err(Error::Shape(format!("gather index {index:?} for [{rows}, {k}]")));
        }
        let data = self.value(x).data();
        let y: Vec<f64> = index.iter().enumerate().map(|(r, &i)| data[r * k + i]).collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Gather { x, index }, Tensor::from_parts(vec![rows], y), needs))
    }

    fn matrix_dims(&self, x: NodeId, what: &str) -> Result<(usize, usize)> {
        match self.shape(x) {
            [rows, k] => Ok((*rows, *k)),
            other => Err(Error::Shape(format!("{what} expects [B, K], got {other:?}"))),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// One reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        let mut param_count = 0;
        for node in &self.nodes {
            if let Op::Leaf(Leaf::Param(i)) = node.op {
                param_count = param_count.max(i + 1);
            }
        }
        let mut out = Gradients {
            params: vec![None; param_count],
            param_shapes: vec![None; param_count],
            input: None,
            input_registered: self.input.is_some(),
        };
        for node in &self.nodes {
            if let Op::Leaf(Leaf::Param(i)) = node.op {
                out.param_shapes[i] = Some(node.value.shape().to_vec());
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf(Leaf::Input) => {
                    out.input = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Leaf(Leaf::Param(i)) => {
                    let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                    out.params[*i] = Some(match out.params[*i].take() {
                        Some(prev) => add_tensors(prev, &t),
                        None => t,
                    });
                }
                Op::Leaf(Leaf::Constant) => {}
                Op::Affine { x, w, b } => {
                    let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let out_w = self.shape(*w)[0];
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; batch * inp];
                        gemm(batch, out_w, inp, &g, false, self.value(*w).data(), false, &mut dx, false);
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![0.0; out_w * inp];
                        gemm(out_w, batch, inp, &g, true, self.value(*x).data(), false, &mut dw, false);
                        accumulate(&mut grads[w.0], dw);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; out_w];
                        for row in g.chunks(out_w) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let xs = self.shape(*x);
                    let (batch, chans, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let ys = node.value.shape();
                    let (out_ch, oh, ow) = (ys[1], ys[2], ys[3]);
                    let plane = oh * ow;
                    let positions = batch * plane;
                    let patch = chans * geom.kernel * geom.kernel;
                    // [B, O, P] -> [O, B*P]
                    let mut g_mat = vec![0.0; out_ch * positions];
                    for n in 0..batch {
                        for o in 0..out_ch {
                            let src = &g[(n * out_ch + o) * plane..(n * out_ch + o + 1) * plane];
                            g_mat[o * positions + n * plane..o * positions + (n + 1) * plane]
                                .copy_from_slice(src);
                        }
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![0.0; out_ch * patch];
                        gemm(out_ch, positions, patch, &g_mat, false, cols, true, &mut dw, false);
                        accumulate(&mut grads[w.0], dw);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f64> =
                            g_mat.chunks(positions).map(|row| row.iter().sum()).collect();
                        accumulate(&mut grads[b.0], db);
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dcols = vec![0.0; patch * positions];
                        gemm(patch, out_ch, positions, self.value(*w).data(), true, &g_mat, false, &mut dcols, false);
                        let dx = col2im(&dcols, batch, chans, h, wd, oh, ow, *geom);
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v >= 0.0 { gv } else { slope * gv })
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sigmoid(x) => {
                    let dx = node.value.data().iter().zip(&g).map(|(s, gv)| gv * s * (1.0 - s)).collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Softmax(x) => {
                    let k = node.value.shape()[1];
                    let mut dx = vec![0.0; g.len()];
                    for ((s, gr), d) in node.value.data().chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                        let inner: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..k {
                            d[i] = s[i] * (gr[i] - inner);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::LogSoftmax(x) => {
                    let k = node.value.shape()[1];
                    let mut dx = vec![0.0; g.len()];
                    for ((ls, gr), d) in node.value.data().chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                        let total: f64 = gr.iter().sum();
                        for i in 0..k {
                            d[i] = gr[i] - ls[i].exp() * total;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::LogSigmoid(x) => {
                    let dx = self.value(*x).data().iter().zip(&g).map(|(&v, gv)| gv * sigmoid(-v)).collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Softplus(x) => {
                    let dx = self.value(*x).data().iter().zip(&g).map(|(&v, gv)| gv * sigmoid(v)).collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Log(x) => {
                    let dx = self.value(*x).data().iter().zip(&g).map(|(v, gv)| gv / v).collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sum(x) => {
                    let dx = vec![g[0]; self.value(*x).len()];
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = g.iter().zip(self.value(*b).data()).map(|(gv, v)| gv * v).collect();
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = g.iter().zip(self.value(*a).data()).map(|(gv, v)| gv * v).collect();
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Scale(x, factor) => {
                    let dx = g.iter().map(|gv| gv * factor).collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Reshape(x) => accumulate(&mut grads[x.0], g),
                Op::SliceRows { x, start } => {
                    let xs = self.shape(*x);
                    let stride: usize = xs[1..].iter().product();
                    let mut dx = vec![0.0; self.value(*x).len()];
                    dx[start * stride..start * stride + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gather { x, index } => {
                    let k = self.shape(*x)[1];
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (r, (&i, gv)) in index.iter().zip(&g).enumerate() {
                        dx[r * k + i] += gv;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
        }
        Ok(out)
    }

    /// `dLoss/dθ` for every registered parameter.
    pub fn param_gradients(&self, loss: NodeId) -> Result<Vec<Tensor>> {
        Ok(self.backward(loss)?.into_params())
    }

    /// `d(scalar)/dx` for the registered input.
    pub fn input_gradient(&self, scalar: NodeId) -> Result<Tensor> {
        if self.input.is_none() {
            return Err(Error::InputNotRegistered);
        }
        self.backward(scalar)?.into_input()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn add_tensors(mut a: Tensor, b: &Tensor) -> Tensor {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    a
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `c = op(a) · op(b)` (or `c +=` when `accumulate`) for row-major
/// matrices, where `a` is logically `[m, k]` and `b` is `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths match the logical dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Unfolds `[B, C, H, W]` into `[C*k*k, B*oh*ow]`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], batch: usize, chans: usize, h: usize, w: usize, oh: usize, ow: usize, g: ConvGeometry) -> Vec<f64> {
    let k = g.kernel;
    let positions = batch * oh * ow;
    let mut cols = vec![0.0; chans * k * k * positions];
    for c in 0..chans {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for n in 0..batch {
                    let src = &x[(n * chans + c) * h * w..(n * chans + c + 1) * h * w];
                    for oi in 0..oh {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = (n * oh + oi) * ow;
                        for oj in 0..ow {
                            let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[base + oj] = src[ii as usize * w + jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], batch: usize, chans: usize, h: usize, w: usize, oh: usize, ow: usize, g: ConvGeometry) -> Vec<f64> {
    let k = g.kernel;
    let positions = batch * oh * ow;
    let mut x = vec![0.0; batch * chans * h * w];
    for c in 0..chans {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for n in 0..batch {
                    let dst = &mut x[(n * chans + c) * h * w..(n * chans + c + 1) * h * w];
                    for oi in 0..oh {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let base = (n * oh + oi) * ow;
                        for oj in 0..ow {
                            let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[ii as usize * w + jj as usize] += src[base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
