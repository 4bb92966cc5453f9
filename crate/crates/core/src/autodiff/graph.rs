//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every primitive appends a node holding its output value. Nodes whose
//! inputs are all untracked are stored as plain constants, so inference-only
//! graphs carry no backward bookkeeping.

use super::conv::{self, ConvDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Ln(Var),
    Exp(Var),
    Sigmoid(Var),
    Square(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    ArgReduceLast {
        input: Var,
        picked: Vec<usize>,
    },
    Reshape(Var),
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    PickLast {
        input: Var,
        picked: Vec<usize>,
    },
    ChannelWeightedSum {
        features: Var,
        weights: Var,
    },
    NormalizeRows {
        input: Var,
        fallback: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of primitive operations. Inputs always precede outputs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` is untracked or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros for tracked nodes the loss ignores.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Strides of `shape` aligned to `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for d in (0..out.len()).rev() {
        strides[d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// For every output element, the flat offsets into `a` and `b`.
fn broadcast_offsets(a: &[usize], b: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; out.len()];
    let mut res = Vec::with_capacity(total);
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..total {
        res.push((oa, ob));
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    res
}

fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, a, b)),
        })
        .collect()
}

fn dims4(op: &str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Shape(format!("{op}: expected rank-4 tensor, got {s:?}"))),
    }
}

fn dims2(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::Shape(format!("{op}: expected rank-2 tensor, got {s:?}"))),
    }
}

fn last_dim(op: &str, t: &Tensor) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::Shape(format!("{op}: scalar input has no last axis")))
}

fn keepdim_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    if let Some(last) = s.last_mut() {
        *last = 1;
    }
    s
}

/// Half-open range of output columns whose input column `ox + k - pad` lies in `[0, w)`.

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Tracked leaf: gradients will be reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let tracked = self.any_tracked(&[x]);
        self.push(value, op, tracked)
    }

    // ----- primitives -----------------------------------------------------

    /// 2-D cross-correlation, stride 1, symmetric zero padding.
    ///
    /// `input` is (N, C, H, W), `weight` is (O, C, KH, KW), `bias` is (O).
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("conv2d input", self.value(input))?;
        let (o, wc, kh, kw) = dims4("conv2d weight", self.value(weight))?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} has {c} channels but weight {:?} expects {wc}",
                self.value(input).shape(),
                self.value(weight).shape()
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err("conv2d", self.value(input).shape(), self.value(weight).shape()));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv2d bias", self.value(b).shape(), &[o]));
            }
        }
        let ho = h + 2 * padding - kh + 1;
        let wo = w + 2 * padding - kw + 1;
        let d = ConvDims {
            c,
            h,
            w,
            o,
            kh,
            kw,
            pad: padding,
            ho,
            wo,
        };
        let y = conv::forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            n,
            &d,
        );
        let value = Tensor::new(vec![n, o, ho, wo], y)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let tracked = self.any_tracked(&inputs);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            },
            tracked,
        ))
    }

    /// `max(x, 0)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// 2×2 max pooling with stride 2 over the trailing two axes of an (N, C, H, W) tensor.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("max_pool2d", self.value(input))?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::Shape(format!(
                "max_pool2d: spatial extent {h}x{w} too small for a 2x2 window"
            )));
        }
        let x = self.value(input).data();
        let mut y = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    y.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], y)?;
        let tracked = self.any_tracked(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, tracked))
    }

    /// Mean over the spatial axes: (N, C, H, W) → (N, C).
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("global_avg_pool", self.value(input))?;
        let area = (h * w) as f64;
        let y = self
            .value(input)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / area)
            .collect();
        let value = Tensor::new(vec![n, c], y)?;
        let tracked = self.any_tracked(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), tracked))
    }

    /// Affine map `x Wᵀ + b` with `x` (N, I), `W` (O, I), `b` (O).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, i) = dims2("linear input", self.value(input))?;
        let (o, wi) = dims2("linear weight", self.value(weight))?;
        if wi != i {
            return Err(shape_err("linear", self.value(input).shape(), self.value(weight).shape()));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(shape_err("linear bias", self.value(b).shape(), &[o]));
            }
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut y = vec![0.0; n * o];
        for r in 0..n {
            let xr = &x[r * i..][..i];
            for k in 0..o {
                let dot: f64 = xr.iter().zip(&wt[k * i..][..i]).map(|(a, b)| a * b).sum();
                let b = bias.map_or(0.0, |b| self.nodes[b.0].value.data()[k]);
                y[r * o + k] = dot + b;
            }
        }
        let value = Tensor::new(vec![n, o], y)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let tracked = self.any_tracked(&inputs);
        Ok(self.push(value, Op::Linear { input, weight, bias }, tracked))
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let out = broadcast_shape(name, ta.shape(), tb.shape())?;
            let data = broadcast_offsets(ta.shape(), tb.shape(), &out)
                .into_iter()
                .map(|(i, j)| f(ta.data()[i], tb.data()[j]))
                .collect();
            Tensor::new(out, data)?
        };
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    /// Elementwise sum; same-rank operands broadcast along unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| k * v, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v + k, Op::Shift(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Natural logarithm (unguarded; see [`Graph::clamp_min`]).
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `max(x, lo)`; no gradient flows through clamped elements.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = last_dim("softmax", self.value(x))?;
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            data.extend(softmax_row(row));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(value, Op::Softmax(x), tracked))
    }

    /// Log-softmax along the last axis, computed stably.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = last_dim("log_softmax", self.value(x))?;
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), tracked))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Sum(x), tracked)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Mean(x), tracked)
    }

    /// Sum along the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let n = last_dim("sum_last", self.value(x))?;
        let t = self.value(x);
        let data = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(keepdim_shape(t.shape()), data)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(value, Op::SumLast(x), tracked))
    }

    /// Maximum along the last axis (first occurrence on ties), keepdim.
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        self.arg_reduce_last("max_last", x, |a, b| a > b)
    }

    /// Minimum along the last axis (first occurrence on ties), keepdim.
    pub fn min_last(&mut self, x: Var) -> Result<Var> {
        self.arg_reduce_last("min_last", x, |a, b| a < b)
    }

    fn arg_reduce_last(&mut self, name: &str, x: Var, better: impl Fn(f64, f64) -> bool) -> Result<Var> {
        let n = last_dim(name, self.value(x))?;
        let t = self.value(x);
        let mut picked = Vec::with_capacity(t.len() / n);
        let mut data = Vec::with_capacity(t.len() / n);
        for (r, row) in t.data().chunks(n).enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if better(v, row[best]) {
                    best = j;
                }
            }
            picked.push(r * n + best);
            data.push(row[best]);
        }
        let value = Tensor::new(keepdim_shape(t.shape()), data)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(value, Op::ArgReduceLast { input: x, picked }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Rows of a (R, C) table selected by index: result is (rows.len(), C).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = dims2("gather_rows", self.value(table))?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!("gather_rows: row {bad} out of range for {r} rows")));
        }
        let t = self.value(table).data();
        let data = rows.iter().flat_map(|&i| t[i * c..(i + 1) * c].iter().copied()).collect();
        let value = Tensor::new(vec![rows.len(), c], data)?;
        let tracked = self.any_tracked(&[table]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            tracked,
        ))
    }

    /// One element per row of a (K, C) tensor: result is (K).
    pub fn pick_last(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (k, c) = dims2("pick_last", self.value(x))?;
        if indices.len() != k {
            return Err(shape_err("pick_last", self.value(x).shape(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::InvalidArgument(format!("pick_last: index {bad} out of range for {c} columns")));
        }
        let picked: Vec<usize> = indices.iter().enumerate().map(|(r, &i)| r * c + i).collect();
        let t = self.value(x).data();
        let data = picked.iter().map(|&p| t[p]).collect();
        let value = Tensor::new(vec![k], data)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(value, Op::PickLast { input: x, picked }, tracked))
    }

    /// Per-sample weighted sum of feature planes.
    ///
    /// `features` is (K, C, H, W), `weights` is (K, C); result is (K, H, W).
    pub fn channel_weighted_sum(&mut self, features: Var, weights: Var) -> Result<Var> {
        let (k, c, h, w) = dims4("channel_weighted_sum", self.value(features))?;
        let (wk, wc) = dims2("channel_weighted_sum weights", self.value(weights))?;
        if (wk, wc) != (k, c) {
            return Err(Error::Shape(format!(
                "channel_weighted_sum: features {:?} need weights [{k}, {c}], got {:?}",
                self.value(features).shape(),
                self.value(weights).shape()
            )));
        }
        let f = self.value(features).data();
        let wt = self.value(weights).data();
        let area = h * w;
        let mut y = vec![0.0; k * area];
        for s in 0..k {
            let out = &mut y[s * area..][..area];
            for ch in 0..c {
                let wv = wt[s * c + ch];
                for (o, &v) in out.iter_mut().zip(&f[(s * c + ch) * area..][..area]) {
                    *o += wv * v;
                }
            }
        }
        let value = Tensor::new(vec![k, h, w], y)?;
        let tracked = self.any_tracked(&[features, weights]);
        Ok(self.push(value, Op::ChannelWeightedSum { features, weights }, tracked))
    }

    /// Divide each last-axis row by its sum. Rows summing below `min_sum`
    /// become uniform and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var, min_sum: f64) -> Result<Var> {
        let n = last_dim("normalize_rows", self.value(x))?;
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.len());
        let mut fallback = Vec::with_capacity(t.len() / n);
        for row in t.data().chunks(n) {
            let s: f64 = row.iter().sum();
            if s < min_sum {
                fallback.push(true);
                data.extend(std::iter::repeat_n(1.0 / n as f64, n));
            } else {
                fallback.push(false);
                data.extend(row.iter().map(|v| v / s));
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(value, Op::NormalizeRows { input: x, fallback }, tracked))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn elementwise(&self, grads: &mut [Option<Vec<f64>>], x: Var, g: &[f64], d: impl Fn(f64) -> f64) {
        let xv = self.nodes[x.0].value.data();
        if let Some(gx) = self.acc(grads, x) {
            for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                *a += gi * d(xi);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                padding,
            } => self.conv2d_backward(input, weight, bias, padding, out.shape(), g, grads),
            &Op::Relu(x) => self.elementwise(grads, x, g, |v| if v > 0.0 { 1.0 } else { 0.0 }),
            Op::MaxPool2d { input, argmax } => {
                if let Some(gx) = self.acc(grads, *input) {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        gx[src] += gi;
                    }
                }
            }
            &Op::GlobalAvgPool(x) => {
                let s = self.value(x).shape();
                let area = s[2] * s[3];
                if let Some(gx) = self.acc(grads, x) {
                    for (plane, &gi) in gx.chunks_mut(area).zip(g) {
                        let d = gi / area as f64;
                        plane.iter_mut().for_each(|a| *a += d);
                    }
                }
            }
            &Op::Linear { input, weight, bias } => {
                let (n, inp) = (self.value(input).shape()[0], self.value(input).shape()[1]);
                let o = self.value(weight).shape()[0];
                let x = self.value(input).data();
                let wt = self.value(weight).data();
                if let Some(gx) = self.acc(grads, input) {
                    for r in 0..n {
                        for k in 0..o {
                            let gi = g[r * o + k];
                            for (a, &wv) in gx[r * inp..][..inp].iter_mut().zip(&wt[k * inp..][..inp]) {
                                *a += gi * wv;
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, weight) {
                    for r in 0..n {
                        for k in 0..o {
                            let gi = g[r * o + k];
                            for (a, &xv) in gw[k * inp..][..inp].iter_mut().zip(&x[r * inp..][..inp]) {
                                *a += gi * xv;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.acc(grads, b) {
                        for row in g.chunks(o) {
                            for (a, &gi) in gb.iter_mut().zip(row) {
                                *a += gi;
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => self.binary_backward(a, b, out.shape(), g, grads, |_, _| (1.0, 1.0)),
            &Op::Sub(a, b) => self.binary_backward(a, b, out.shape(), g, grads, |_, _| (1.0, -1.0)),
            &Op::Mul(a, b) => self.binary_backward(a, b, out.shape(), g, grads, |x, y| (y, x)),
            &Op::Div(a, b) => self.binary_backward(a, b, out.shape(), g, grads, |x, y| (1.0 / y, -x / (y * y))),
            &Op::Scale(x, k) => self.elementwise(grads, x, g, |_| k),
            &Op::Shift(x) => self.elementwise(grads, x, g, |_| 1.0),
            &Op::Ln(x) => self.elementwise(grads, x, g, |v| 1.0 / v),
            &Op::Exp(x) => self.elementwise(grads, x, g, |v| v.exp()),
            &Op::Sigmoid(x) => self.elementwise(grads, x, g, |v| {
                let s = sigmoid(v);
                s * (1.0 - s)
            }),
            &Op::Square(x) => self.elementwise(grads, x, g, |v| 2.0 * v),
            &Op::ClampMin(x, lo) => self.elementwise(grads, x, g, |v| if v > lo { 1.0 } else { 0.0 }),
            &Op::Softmax(x) => {
                let n = *out.shape().last().expect("softmax rank");
                if let Some(gx) = self.acc(grads, x) {
                    for ((gxr, yr), gr) in gx.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((a, &y), &gi) in gxr.iter_mut().zip(yr).zip(gr) {
                            *a += y * (gi - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let n = *out.shape().last().expect("log_softmax rank");
                if let Some(gx) = self.acc(grads, x) {
                    for ((gxr, yr), gr) in gx.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((a, &y), &gi) in gxr.iter_mut().zip(yr).zip(gr) {
                            *a += gi - y.exp() * total;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    let d = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += d);
                }
            }
            &Op::SumLast(x) => {
                let n = *self.value(x).shape().last().expect("sum_last rank");
                if let Some(gx) = self.acc(grads, x) {
                    for (row, &gi) in gx.chunks_mut(n).zip(g) {
                        row.iter_mut().for_each(|a| *a += gi);
                    }
                }
            }
            Op::ArgReduceLast { input, picked } | Op::PickLast { input, picked } => {
                if let Some(gx) = self.acc(grads, *input) {
                    for (&p, &gi) in picked.iter().zip(g) {
                        gx[p] += gi;
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    for (a, &gi) in gx.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
            }
            Op::GatherRows { table, rows } => {
                let c = self.value(*table).shape()[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (&r, gr) in rows.iter().zip(g.chunks(c)) {
                        for (a, &gi) in gt[r * c..][..c].iter_mut().zip(gr) {
                            *a += gi;
                        }
                    }
                }
            }
            &Op::ChannelWeightedSum { features, weights } => {
                let s = self.value(features).shape();
                let (k, c, area) = (s[0], s[1], s[2] * s[3]);
                let f = self.value(features).data();
                let wt = self.value(weights).data();
                if let Some(gf) = self.acc(grads, features) {
                    for sm in 0..k {
                        let gs = &g[sm * area..][..area];
                        for ch in 0..c {
                            let wv = wt[sm * c + ch];
                            for (a, &gi) in gf[(sm * c + ch) * area..][..area].iter_mut().zip(gs) {
                                *a += wv * gi;
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, weights) {
                    for sm in 0..k {
                        let gs = &g[sm * area..][..area];
                        for ch in 0..c {
                            let plane = &f[(sm * c + ch) * area..][..area];
                            gw[sm * c + ch] += plane.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            Op::NormalizeRows { input, fallback } => {
                let n = *out.shape().last().expect("normalize_rows rank");
                let x = self.value(*input).data();
                if let Some(gx) = self.acc(grads, *input) {
                    for (r, &fb) in fallback.iter().enumerate() {
                        if fb {
                            continue;
                        }
                        let xr = &x[r * n..][..n];
                        let yr = &out.data()[r * n..][..n];
                        let gr = &g[r * n..][..n];
                        let s: f64 = xr.iter().sum();
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for (a, &gi) in gx[r * n..][..n].iter_mut().zip(gr) {
                            *a += (gi - dot) / s;
                        }
                    }
                }
            }
        }
    }

    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        partials: impl Fn(f64, f64) -> (f64, f64),
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let offsets: Vec<(usize, usize)> = if ta.shape() == tb.shape() {
            (0..ta.len()).map(|i| (i, i)).collect()
        } else {
            broadcast_offsets(ta.shape(), tb.shape(), out_shape)
        };
        let (da, db): (Vec<f64>, Vec<f64>) = offsets
            .iter()
            .zip(g)
            .map(|(&(i, j), &gi)| {
                let (pa, pb) = partials(ta.data()[i], tb.data()[j]);
                (gi * pa, gi * pb)
            })
            .unzip();
        if let Some(ga) = self.acc(grads, a) {
            for (&(i, _), d) in offsets.iter().zip(&da) {
                ga[i] += d;
            }
        }
        if let Some(gb) = self.acc(grads, b) {
            for (&(_, j), d) in offsets.iter().zip(&db) {
                gb[j] += d;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let d = ConvDims {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            pad: padding,
            ho: out_shape[2],
            wo: out_shape[3],
        };
        if let Some(b) = bias {
            if let Some(gb) = self.acc(grads, b) {
                for (p, plane) in g.chunks(d.ho * d.wo).enumerate() {
                    gb[p % d.o] += plane.iter().sum::<f64>();
                }
            }
        }
        let mut gw = self.nodes[weight.0].tracked.then(|| vec![0.0; self.value(weight).len()]);
        let mut gx = self.nodes[input.0].tracked.then(|| vec![0.0; self.value(input).len()]);
        conv::backward(
            self.value(input).data(),
            self.value(weight).data(),
            g,
            xs[0],
            &d,
            gw.as_deref_mut(),
            gx.as_deref_mut(),
        );
        for (v, delta) in [(weight, gw), (input, gx)] {
            if let (Some(delta), Some(acc)) = (delta, self.acc(grads, v)) {
                for (a, b) in acc.iter_mut().zip(delta) {
                    *a += b;
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
