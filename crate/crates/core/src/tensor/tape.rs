use std::sync::atomic::{AtomicU64, Ordering};

use super::{dot, matmul_raw, GradientMap, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Constant,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale(f64),
    ScaleBy,
    AddScalar,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Clamp(f64, f64),
    LogSoftmax,
    Mean(Option<usize>),
    Sum,
    PickPerRow(Vec<usize>),
    Grl(f64),
    PairwiseSqDist,
    Concat,
    Slice(usize),
    Stack,
    VirtualStep { alpha: f64, direction: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    tracked: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, which is a topological order.
/// [`Tape::backward`] takes the tape by value: a recorded pass can be
/// differentiated once, and handles from any other tape are rejected.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::StaleGraph);
        }
        Ok(&self.nodes[v.index])
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let tracked = match op {
            Op::Param(_) => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i].tracked),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            tracked,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Current value of a recorded variable.
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.check(v)?.value)
    }

    /// Whether gradients can flow from `v` back to some parameter.
    pub fn is_tracked(&self, v: Var) -> Result<bool> {
        Ok(self.check(v)?.tracked)
    }

    /// Records a trainable leaf bound to `id`.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        self.push(Op::Param(id), Vec::new(), value.clone())
    }

    /// Records every parameter of `store` as a leaf, indexed by `ParamId`.
    pub fn bind_all(&mut self, store: &ParamStore) -> Vec<Var> {
        store.ids().map(|id| self.param(id, store.get(id))).collect()
    }

    /// Records a value that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, Vec::new(), value)
    }

    /// Same values as `x`, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.check(x)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", &self.check(a)?.value)?;
        let (k2, n) = matrix_dims("matmul", &self.check(b)?.value)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let out = matmul_raw(self.nodes[a.index].value.data(), self.nodes[b.index].value.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul, vec![a.index, b.index], value))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims("add_bias", &self.check(x)?.value)?;
        let b = &self.check(bias)?.value;
        if b.shape() != [n] {
            return Err(Error::shape("add_bias", format!("bias {:?} for {n} columns", b.shape())));
        }
        let mut data = self.nodes[x.index].value.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::AddBias, vec![x.index, bias.index], value))
    }

    fn binary(&mut self, op: Op, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let av = &self.check(a)?.value;
        let bv = &self.check(b)?.value;
        same_shape(name, av, bv)?;
        let value = zip_map(av, bv, f);
        Ok(self.push(op, vec![a.index, b.index], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = map(&self.check(x)?.value, f);
        Ok(self.push(op, vec![x.index], value))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(c), x, |v| v * c)
    }

    /// Multiplies every entry of `x` by the single-element variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.check(s)?.value.item()?;
        let value = map(&self.check(x)?.value, |v| v * sv);
        Ok(self.push(Op::ScaleBy, vec![x.index, s.index], value))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar, x, |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    /// Elementwise `max(x, 0)`; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu, x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp, x, f64::exp)
    }

    /// Natural logarithm; nonpositive inputs propagate NaN or -inf.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Log, x, f64::ln)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Abs, x, f64::abs)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input lies inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.unary(Op::Clamp(lo, hi), x, |v| v.clamp(lo, hi))
    }

    /// Row-wise log-softmax of an `n x K` matrix, `K >= 2`.
    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        let (n, k) = matrix_dims("log_softmax", &self.check(logits)?.value)?;
        if k < 2 {
            return Err(Error::shape("log_softmax", format!("need at least 2 classes, got {k}")));
        }
        let src = self.nodes[logits.index].value.data();
        let mut out = vec![0.0; n * k];
        for (row, orow) in src.chunks(k).zip(out.chunks_mut(k)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v - max - lse;
            }
        }
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(Op::LogSoftmax, vec![logits.index], value))
    }

    /// Row-wise softmax, built from [`Tape::log_softmax`] and [`Tape::exp`].
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let ls = self.log_softmax(logits)?;
        self.exp(ls)
    }

    /// Arithmetic mean over all entries (scalar result), or over one axis of
    /// a matrix: axis 0 averages rows into a length-`cols` vector, axis 1
    /// averages columns into a length-`rows` vector.
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = &self.check(x)?.value;
        let value = match axis {
            None => {
                let total: f64 = xv.data().iter().sum();
                Tensor::scalar(total / xv.len() as f64)
            }
            Some(axis) => {
                let (r, c) = matrix_dims("mean", xv)?;
                match axis {
                    0 => {
                        let mut acc = vec![0.0; c];
                        for row in xv.data().chunks(c) {
                            for (a, v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        Tensor::vector(acc.into_iter().map(|a| a / r as f64).collect())
                    }
                    1 => Tensor::vector(
                        xv.data()
                            .chunks(c)
                            .map(|row| row.iter().sum::<f64>() / c as f64)
                            .collect(),
                    ),
                    _ => return Err(Error::shape("mean", format!("axis {axis} out of range for a matrix"))),
                }
            }
        };
        Ok(self.push(Op::Mean(axis), vec![x.index], value))
    }

    /// Sum of all entries.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.check(x)?.value.data().iter().sum();
        Ok(self.push(Op::Sum, vec![x.index], Tensor::scalar(total)))
    }

    /// Picks `x[i, index[i]]` from each row of an `n x K` matrix.
    pub fn pick_per_row(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = &self.check(x)?.value;
        let (n, k) = matrix_dims("pick_per_row", xv)?;
        if index.len() != n {
            return Err(Error::shape("pick_per_row", format!("{} indices for {n} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(Error::invalid("label", format!("{bad} not in [0, {k})")));
        }
        let value = Tensor::vector(index.iter().enumerate().map(|(i, &j)| xv.data()[i * k + j]).collect());
        Ok(self.push(Op::PickPerRow(index.to_vec()), vec![x.index], value))
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda`
    /// backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid("lambda", format!("{lambda} must be finite and >= 0")));
        }
        let value = self.check(x)?.value.clone();
        Ok(self.push(Op::Grl(lambda), vec![x.index], value))
    }

    /// `out[i, j] = ||a_i - b_j||^2` for an `n x h` and an `m x h` matrix.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, h) = matrix_dims("pairwise_sq_dist", &self.check(a)?.value)?;
        let (m, h2) = matrix_dims("pairwise_sq_dist", &self.check(b)?.value)?;
        if h != h2 {
            return Err(Error::shape("pairwise_sq_dist", format!("widths {h} vs {h2}")));
        }
        let ad = self.nodes[a.index].value.data();
        let bd = self.nodes[b.index].value.data();
        let mut out = Vec::with_capacity(n * m);
        for ai in ad.chunks(h) {
            for bj in bd.chunks(h) {
                out.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::PairwiseSqDist, vec![a.index, b.index], value))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.check(x)?.value.data());
        }
        let value = Tensor::vector(data);
        Ok(self.push(Op::Concat, xs.iter().map(|v| v.index).collect(), value))
    }

    /// Contiguous region of a flattened tensor, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let xv = &self.check(x)?.value;
        let numel: usize = shape.iter().product();
        if offset + numel > xv.len() {
            return Err(Error::shape("slice", format!("{offset}+{numel} exceeds {}", xv.len())));
        }
        let value = Tensor::new(shape.to_vec(), xv.data()[offset..offset + numel].to_vec())?;
        Ok(self.push(Op::Slice(offset), vec![x.index], value))
    }

    /// Stacks single-element variables into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("stack", "no inputs"));
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            data.push(self.check(x)?.value.item()?);
        }
        let value = Tensor::vector(data);
        Ok(self.push(Op::Stack, xs.iter().map(|v| v.index).collect(), value))
    }

    /// `theta - alpha * weight * direction`, with `direction` a constant.
    ///
    /// Backward sends the upstream gradient to `theta` unchanged and
    /// `-alpha * <direction, upstream>` to the single-element `weight`. The
    /// direction carries no gradient, which is exactly the first-order rule.
    pub fn virtual_step(&mut self, theta: Var, weight: Var, direction: &[f64], alpha: f64) -> Result<Var> {
        let w = self.check(weight)?.value.item()?;
        let tv = &self.check(theta)?.value;
        if tv.len() != direction.len() {
            return Err(Error::shape(
                "virtual_step",
                format!("direction has {} entries, parameters {}", direction.len(), tv.len()),
            ));
        }
        let step = alpha * w;
        let data = tv.data().iter().zip(direction).map(|(t, d)| t - step * d).collect();
        let value = Tensor::new(tv.shape().to_vec(), data)?;
        Ok(self.push(
            Op::VirtualStep {
                alpha,
                direction: direction.to_vec(),
            },
            vec![theta.index, weight.index],
            value,
        ))
    }

    /// Reverse-mode accumulation from the scalar `loss`.
    ///
    /// Returns one gradient per id in `wanted`; ids unreachable from the loss
    /// get zeros of the parameter's recorded shape, and ids never bound on
    /// this tape are an error.
    pub fn backward(self, loss: Var, wanted: &[ParamId]) -> Result<GradientMap> {
        let root = self.check(loss)?;
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        let mut out = GradientMap::new();

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Param(id) = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                let mut single = GradientMap::new();
                single.insert(id, t);
                out.accumulate(&single)?;
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut result = GradientMap::new();
        for &id in wanted {
            match out.get(id) {
                Some(g) => result.insert(id, g.clone()),
                None => {
                    let shape = self
                        .nodes
                        .iter()
                        .find(|n| matches!(n.op, Op::Param(p) if p == id))
                        .map(|n| n.value.shape().to_vec())
                        .ok_or_else(|| Error::Contract(format!("parameter {} is not bound on this graph", id.0)))?;
                    result.insert(id, Tensor::zeros(&shape));
                }
            }
        }
        Ok(result)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut send = |input: usize, contribution: Vec<f64>| {
            if !nodes[input].tracked {
                return;
            }
            match &mut grads[input] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contribution) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        let input = |k: usize| &nodes[node.inputs[k]].value;
        let y = &node.value;

        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                if nodes[node.inputs[0]].tracked {
                    let bt = transpose(b.data(), k, n);
                    send(node.inputs[0], matmul_raw(g, &bt, m, n, k));
                }
                if nodes[node.inputs[1]].tracked {
                    let at = transpose(a.data(), m, k);
                    send(node.inputs[1], matmul_raw(&at, g, k, m, n));
                }
            }
            Op::AddBias => {
                let n = y.cols();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                send(node.inputs[0], g.to_vec());
                send(node.inputs[1], gb);
            }
            Op::Add => {
                send(node.inputs[0], g.to_vec());
                send(node.inputs[1], g.to_vec());
            }
            Op::Sub => {
                send(node.inputs[0], g.to_vec());
                send(node.inputs[1], g.iter().map(|v| -v).collect());
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                send(node.inputs[0], g.iter().zip(b.data()).map(|(u, v)| u * v).collect());
                send(node.inputs[1], g.iter().zip(a.data()).map(|(u, v)| u * v).collect());
            }
            Op::Scale(c) => send(node.inputs[0], g.iter().map(|u| u * c).collect()),
            Op::ScaleBy => {
                let (x, s) = (input(0), input(1).data()[0]);
                send(node.inputs[0], g.iter().map(|u| u * s).collect());
                send(node.inputs[1], vec![dot(g, x.data())]);
            }
            Op::AddScalar => send(node.inputs[0], g.to_vec()),
            Op::Relu => {
                let x = input(0);
                send(
                    node.inputs[0],
                    g.iter().zip(x.data()).map(|(u, &v)| if v > 0.0 { *u } else { 0.0 }).collect(),
                );
            }
            Op::Tanh => send(
                node.inputs[0],
                g.iter().zip(y.data()).map(|(u, t)| u * (1.0 - t * t)).collect(),
            ),
            Op::Sigmoid => send(
                node.inputs[0],
                g.iter().zip(y.data()).map(|(u, s)| u * s * (1.0 - s)).collect(),
            ),
            Op::Exp => send(node.inputs[0], g.iter().zip(y.data()).map(|(u, e)| u * e).collect()),
            Op::Log => send(
                node.inputs[0],
                g.iter().zip(input(0).data()).map(|(u, x)| u / x).collect(),
            ),
            Op::Abs => send(
                node.inputs[0],
                g.iter()
                    .zip(input(0).data())
                    .map(|(u, &x)| {
                        if x > 0.0 {
                            *u
                        } else if x < 0.0 {
                            -u
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Clamp(lo, hi) => send(
                node.inputs[0],
                g.iter()
                    .zip(input(0).data())
                    .map(|(u, x)| if x >= lo && x <= hi { *u } else { 0.0 })
                    .collect(),
            ),
            Op::LogSoftmax => {
                let k = y.cols();
                let mut gx = vec![0.0; g.len()];
                for ((grow, yrow), orow) in g.chunks(k).zip(y.data().chunks(k)).zip(gx.chunks_mut(k)) {
                    let total: f64 = grow.iter().sum();
                    for ((o, u), l) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = u - l.exp() * total;
                    }
                }
                send(node.inputs[0], gx);
            }
            Op::Mean(axis) => {
                let x = input(0);
                let gx = match axis {
                    None => vec![g[0] / x.len() as f64; x.len()],
                    Some(0) => {
                        let r = x.rows() as f64;
                        let mut gx = Vec::with_capacity(x.len());
                        for _ in 0..x.rows() {
                            gx.extend(g.iter().map(|u| u / r));
                        }
                        gx
                    }
                    Some(_) => {
                        let c = x.cols();
                        g.iter().flat_map(|u| std::iter::repeat_n(u / c as f64, c)).collect()
                    }
                };
                send(node.inputs[0], gx);
            }
            Op::Sum => send(node.inputs[0], vec![g[0]; input(0).len()]),
            Op::PickPerRow(index) => {
                let x = input(0);
                let k = x.cols();
                let mut gx = vec![0.0; x.len()];
                for (i, (&j, u)) in index.iter().zip(g).enumerate() {
                    gx[i * k + j] = *u;
                }
                send(node.inputs[0], gx);
            }
            Op::Grl(lambda) => send(node.inputs[0], g.iter().map(|u| -lambda * u).collect()),
            Op::PairwiseSqDist => {
                let (a, b) = (input(0), input(1));
                let h = a.cols();
                let m = b.rows();
                let mut ga = vec![0.0; a.len()];
                let mut gb = vec![0.0; b.len()];
                for (i, ai) in a.data().chunks(h).enumerate() {
                    for (j, bj) in b.data().chunks(h).enumerate() {
                        let u = 2.0 * g[i * m + j];
                        for p in 0..h {
                            let d = u * (ai[p] - bj[p]);
                            ga[i * h + p] += d;
                            gb[j * h + p] -= d;
                        }
                    }
                }
                send(node.inputs[0], ga);
                send(node.inputs[1], gb);
            }
            Op::Concat => {
                let mut offset = 0;
                for &inp in &node.inputs {
                    let len = nodes[inp].value.len();
                    send(inp, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Slice(offset) => {
                let mut gx = vec![0.0; input(0).len()];
                gx[*offset..offset + g.len()].copy_from_slice(g);
                send(node.inputs[0], gx);
            }
            Op::Stack => {
                for (&inp, u) in node.inputs.iter().zip(g) {
                    send(inp, vec![*u]);
                }
            }
            Op::VirtualStep { alpha, direction } => {
                send(node.inputs[0], g.to_vec());
                send(node.inputs[1], vec![-alpha * dot(direction, g)]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut store = ParamStore::new();
        let x = store.register("x", t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]));
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let xv = tape.param(x, store.get(x));
        let y = tape.matmul(eye, xv).unwrap();
        assert_eq!(tape.value(y).unwrap(), store.get(x));
    }

    #[test]
    fn zero_matmul_gradients_are_transposed_operands() {
        let mut store = ParamStore::new();
        let a = store.register("a", t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = store.register("b", Tensor::zeros(&[3, 2]));
        let mut tape = Tape::new();
        let av = tape.param(a, store.get(a));
        let bv = tape.param(b, store.get(b));
        let y = tape.matmul(av, bv).unwrap();
        assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s, &[a, b]).unwrap();
        // unit upstream: dA = 1·Bᵀ (zeros), dB = Aᵀ·1 (column sums of A broadcast)
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(grads.get(b).unwrap().data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn relu_values_and_masked_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);

        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::vector(vec![-1.0, 2.0]));
        let mut tape = Tape::new();
        let pv = tape.param(p, store.get(p));
        let r = tape.relu(pv).unwrap();
        let five = tape.constant(Tensor::vector(vec![5.0, 5.0]));
        let prod = tape.mul(r, five).unwrap();
        let s = tape.sum(prod).unwrap();
        let g = tape.backward(s, &[p]).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 5.0]);
    }

    #[test]
    fn log_softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let y = tape.log_softmax(x).unwrap();
        for v in tape.value(y).unwrap().data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
        let row = vec![0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = row.iter().map(|v| v + 17.0).collect();
        let a = tape.constant(Tensor::matrix(1, 4, row).unwrap());
        let b = tape.constant(Tensor::matrix(1, 4, shifted).unwrap());
        let la = tape.log_softmax(a).unwrap();
        let lb = tape.log_softmax(b).unwrap();
        for (p, q) in tape.value(la).unwrap().data().iter().zip(tape.value(lb).unwrap().data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let one = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        assert!(tape.log_softmax(one).is_err());
    }

    #[test]
    fn mean_values_and_gradient() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::vector(vec![2.0, 4.0]));
        let mut tape = Tape::new();
        let pv = tape.param(p, store.get(p));
        let m = tape.mean(pv, None).unwrap();
        assert_eq!(tape.value(m).unwrap().item().unwrap(), 3.0);
        let g = tape.backward(m, &[p]).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.5, 0.5]);

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3, 2], 7.25));
        let m0 = tape.mean(c, Some(0)).unwrap();
        let m1 = tape.mean(c, Some(1)).unwrap();
        assert_eq!(tape.value(m0).unwrap().data(), &[7.25, 7.25]);
        assert_eq!(tape.value(m1).unwrap().data(), &[7.25, 7.25, 7.25]);
        assert!(tape.mean(c, Some(2)).is_err());
    }

    #[test]
    fn detach_stops_gradient() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::vector(vec![1.5, -2.0, 0.25]));
        let mut tape = Tape::new();
        let xv = tape.param(x, store.get(x));
        let d = tape.detach(xv).unwrap();
        assert_eq!(tape.value(d).unwrap(), store.get(x));
        let prod = tape.mul(d, xv).unwrap();
        let s = tape.sum(prod).unwrap();
        let g = tape.backward(s, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap(), store.get(x));
    }

    #[test]
    fn backward_of_sum_and_half_square() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::matrix(2, 2, vec![0.5, -1.0, 3.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let wv = tape.param(w, store.get(w));
        let s = tape.sum(wv).unwrap();
        assert_eq!(tape.backward(s, &[w]).unwrap().get(w).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let wv = tape.param(w, store.get(w));
        let sq = tape.mul(wv, wv).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        assert_eq!(tape.backward(half, &[w]).unwrap().get(w).unwrap(), store.get(w));
    }

    #[test]
    fn backward_contract_errors() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let wv = tape.param(w, store.get(w));
        let doubled = tape.scale(wv, 2.0).unwrap();
        assert!(matches!(tape.backward(doubled, &[w]), Err(Error::Contract(_))));

        let mut other = Tape::new();
        let ov = other.param(w, store.get(w));
        let os = other.sum(ov).unwrap();
        let tape = Tape::new();
        assert!(matches!(tape.backward(os, &[w]), Err(Error::StaleGraph)));
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::vector(vec![1.0, 2.0]));
        let b = store.register("b", Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let mut tape = Tape::new();
        let av = tape.param(a, store.get(a));
        let _bv = tape.param(b, store.get(b));
        let s = tape.sum(av).unwrap();
        let g = tape.backward(s, &[a, b]).unwrap();
        assert_eq!(g.get(b).unwrap(), &Tensor::zeros(&[1, 3]));
    }

    #[test]
    fn virtual_step_first_order_gradients() {
        let mut store = ParamStore::new();
        let theta = store.register("theta", Tensor::vector(vec![1.0, -0.5]));
        let beta = store.register("beta", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let tv = tape.param(theta, store.get(theta));
        let bv = tape.param(beta, store.get(beta));
        let stepped = tape.virtual_step(tv, bv, &[0.5, 1.0], 0.1).unwrap();
        assert_eq!(tape.value(stepped).unwrap().data(), &[0.9, -0.7]);
        let up = tape.constant(Tensor::vector(vec![3.0, -1.0]));
        let prod = tape.mul(stepped, up).unwrap();
        let s = tape.sum(prod).unwrap();
        let g = tape.backward(s, &[theta, beta]).unwrap();
        assert_eq!(g.get(theta).unwrap().data(), &[3.0, -1.0]);
        assert_eq!(g.get(beta).unwrap().item().unwrap(), -0.1 * (0.5 * 3.0 - 1.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let x = Tensor::matrix(2, 3, vec![0.1, -0.7, 1.3, 2.2, -0.4, 0.9]).unwrap();
        let w = Tensor::matrix(3, 2, vec![0.3, -0.2, 0.8, 0.05, -1.1, 0.6]).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let y = tape.matmul(xv, wv).unwrap();
            let z = tape.log_softmax(y).unwrap();
            tape.value(z).unwrap().clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
