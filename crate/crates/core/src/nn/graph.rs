//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every op executed through it as a node holding the
//! output value and enough information to push gradients back to the inputs.
//! Nodes are appended in execution order, so a reverse sweep over the node
//! list is a reverse topological traversal.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand is one row repeated over every row of the left operand.
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        cols: Vec<f64>,
    },
    GatedTanhSigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Mse(Var, Var),
    L1(Var, Var),
    Mean(Var),
    Sum(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    StraightThrough(Var),
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Gradient tape. One per training step; confined to a single thread.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    recording: bool,
    backward_done: bool,
    bound_params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            backward_done: false,
            bound_params: HashMap::new(),
        }
    }

    /// A graph that never records backward information. Used for sampling
    /// and evaluation.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad: requires_grad && self.recording,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Bind a trainable parameter. Binding the same parameter twice returns
    /// the same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound_params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.shared(id),
            requires_grad: self.recording,
            op: Op::Leaf,
        });
        self.grads.push(None);
        let v = Var(self.nodes.len() - 1);
        self.bound_params.insert(id, v);
        v
    }

    /// Value of `v` as a constant leaf: gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every bound parameter. Parameters the loss does not
    /// reach get a zero gradient.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<_> = self
            .bound_params
            .iter()
            .map(|(&id, &v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound_params.get(&id).copied()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ---------------------------------------------------------------- ops

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if tb.len() == 1 {
            Ok(Bcast::Scalar)
        } else if tb.len() == ta.cols() && tb.rows() == 1 && ta.rank() <= 2 {
            Ok(Bcast::Row)
        } else {
            Err(Error::dim(
                op,
                format!("left {:?} vs right {:?}", ta.shape(), tb.shape()),
            ))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Bcast::Same => bd[i],
                    Bcast::Row => bd[i % cols],
                    Bcast::Scalar => bd[0],
                };
                f(x, y)
            })
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, mk(a, b, bc), &[a, b]))
    }

    /// Elementwise sum. The right operand may be a scalar or a single row
    /// broadcast over every row of the left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner axes differ: left axis 1 = {k}, right axis 0 = {k2}"),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        general_mat_mul(1.0, &ta.view2(), &tb.view2(), 0.0, &mut out.view2_mut());
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Dilated 1-D convolution over the time axis with zero "same" padding.
    ///
    /// `x` is `[frames, c_in]`, `w` is `[kernel, c_in, c_out]` and the
    /// optional bias is `[c_out]`. Tap `k` reads frame `t + (k - kernel/2) * dilation`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 3 {
            return Err(Error::dim(
                "conv1d",
                format!("input {:?} must be [T, C], weight {:?} must be [K, Cin, Cout]", tx.shape(), tw.shape()),
            ));
        }
        if dilation == 0 {
            return Err(Error::dim("conv1d", "dilation must be positive"));
        }
        let (frames, c_in) = tx.dims2();
        let (kernel, w_in, c_out) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if w_in != c_in {
            return Err(Error::dim(
                "conv1d",
                format!("input axis 1 = {c_in} but weight axis 1 = {w_in}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(Error::dim(
                    "conv1d",
                    format!("bias length {} but weight axis 2 = {c_out}", self.value(b).len()),
                ));
            }
        }
        let cols = im2col(tx.data(), frames, c_in, kernel, dilation);
        let mut out = vec![0.0; frames * c_out];
        {
            let cv = ArrayView2::from_shape((frames, kernel * c_in), &cols).unwrap();
            let wv = ArrayView2::from_shape((kernel * c_in, c_out), tw.data()).unwrap();
            let mut ov = ArrayViewMut2::from_shape((frames, c_out), &mut out).unwrap();
            general_mat_mul(1.0, &cv, &wv, 0.0, &mut ov);
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                row.iter_mut().zip(bd).for_each(|(o, &bb)| *o += bb);
            }
        }
        let out = Tensor::new(&[frames, c_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let keep = self.recording;
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                dilation,
                cols: if keep { cols } else { Vec::new() },
            },
            &inputs,
        ))
    }

    /// WaveNet gate: splits the last axis `[.., 2C]` into halves `a, b` and
    /// returns `tanh(a) * sigmoid(b)`.
    pub fn gated_tanh_sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if cols % 2 != 0 || tx.rank() != 2 {
            return Err(Error::dim(
                "gated_tanh_sigmoid",
                format!("axis 1 of {:?} must be even", tx.shape()),
            ));
        }
        let half = cols / 2;
        let mut out = Vec::with_capacity(rows * half);
        for r in 0..rows {
            let row = tx.row(r);
            for c in 0..half {
                out.push(row[c].tanh() * sigmoid(row[half + c]));
            }
        }
        let out = Tensor::new(&[rows, half], out)?;
        Ok(self.push(out, Op::GatedTanhSigmoid(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // `f64::max` would map NaN to 0 and hide a divergence.
        let out = self.value(x).map(|v| if v < 0.0 { 0.0 } else { v });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Normalizes each row over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "axis 1 = {cols}, gamma {:?}, beta {:?}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.push(h);
                out.push(h * g[c] + bt[c]);
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gathers rows of `table` (`[vocab, dim]`) by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, dim) = tt.dims2();
        if ids.is_empty() {
            return Err(Error::dim("embedding_lookup", "empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::dim(
                "embedding_lookup",
                format!("index {bad} outside axis 0 of size {vocab}"),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(&[ids.len(), dim], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.len() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    /// Mean absolute difference over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("l1", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.len() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::L1(a, b), &[a, b]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns), or
    /// rank-1 tensors along axis 0.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let rank = self.value(*first).rank();
        if parts.iter().any(|p| self.value(*p).rank() != rank) || rank > 2 || axis >= rank {
            return Err(Error::dim("concat", format!("axis {axis} invalid for mixed/rank-{rank} inputs")));
        }
        let out = if rank == 1 || axis == 0 {
            let cols = self.value(*first).cols();
            if parts.iter().any(|p| self.value(*p).cols() != cols) {
                return Err(Error::dim("concat", "axis 1 sizes differ"));
            }
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|p| self.value(*p).data().iter().copied())
                .collect();
            if rank == 1 {
                let n = data.len();
                Tensor::new(&[n], data)?
            } else {
                Tensor::new(&[data.len() / cols, cols], data)?
            }
        } else {
            let rows = self.value(*first).rows();
            if parts.iter().any(|p| self.value(*p).rows() != rows) {
                return Err(Error::dim("concat", "axis 0 sizes differ"));
            }
            let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(r));
                }
            }
            Tensor::new(&[rows, total], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        if rank > 2 || axis >= rank {
            return Err(Error::dim("slice", format!("axis {axis} invalid for {:?}", t.shape())));
        }
        let extent = t.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} exceeds axis {axis} of size {extent}", start + len),
            ));
        }
        let out = if rank == 1 {
            Tensor::new(&[len], t.data()[start..start + len].to_vec())?
        } else if axis == 0 {
            let c = t.cols();
            Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let rows = t.rows();
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&t.row(r)[start..start + len]);
            }
            Tensor::new(&[rows, len], data)?
        };
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Forward value `quantized`, backward identity onto `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor) -> Result<Var> {
        if quantized.shape() != self.value(x).shape() {
            return Err(Error::dim(
                "straight_through",
                format!("{:?} vs {:?}", self.value(x).shape(), quantized.shape()),
            ));
        }
        Ok(self.push(quantized, Op::StraightThrough(x), &[x]))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward called twice without zero_grads".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Tape("tape is empty".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn reduce_bcast(&self, g: &[f64], b: Var, bc: Bcast, cols: usize) -> Vec<f64> {
        match bc {
            Bcast::Same => g.to_vec(),
            Bcast::Scalar => vec![g.iter().sum()],
            Bcast::Row => {
                let mut out = vec![0.0; self.value(b).len()];
                for row in g.chunks(cols) {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                out
            }
        }
    }

    fn bcast_value(&self, b: Var, bc: Bcast, i: usize, cols: usize) -> f64 {
        let d = self.value(b).data();
        match bc {
            Bcast::Same => d[i],
            Bcast::Row => d[i % cols],
            Bcast::Scalar => d[0],
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is moved out temporarily so we can borrow self mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                let cols = self.value(*a).cols();
                if self.wants(*a) {
                    self.accumulate(*a, g.to_vec());
                }
                if self.wants(*b) {
                    let gb = self.reduce_bcast(g, *b, *bc, cols);
                    self.accumulate(*b, gb);
                }
            }
            Op::Sub(a, b, bc) => {
                let cols = self.value(*a).cols();
                if self.wants(*a) {
                    self.accumulate(*a, g.to_vec());
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    let gb = self.reduce_bcast(&neg, *b, *bc, cols);
                    self.accumulate(*b, gb);
                }
            }
            Op::Mul(a, b, bc) => {
                let cols = self.value(*a).cols();
                if self.wants(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv * self.bcast_value(*b, *bc, k, cols))
                        .collect();
                    self.accumulate(*a, ga);
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    let prod: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                    let gb = self.reduce_bcast(&prod, *b, *bc, cols);
                    self.accumulate(*b, gb);
                }
            }
            Op::Scale(a, c) => {
                let ga = g.iter().map(|v| v * c).collect();
                self.accumulate(*a, ga);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                let gv = ArrayView2::from_shape((m, n), g).unwrap();
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    let mut gav = ArrayViewMut2::from_shape((m, k), &mut ga).unwrap();
                    general_mat_mul(1.0, &gv, &self.value(*b).view2().t(), 0.0, &mut gav);
                    self.accumulate(*a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    let mut gbv = ArrayViewMut2::from_shape((k, n), &mut gb).unwrap();
                    general_mat_mul(1.0, &self.value(*a).view2().t(), &gv, 0.0, &mut gbv);
                    self.accumulate(*b, gb);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                dilation,
                cols,
            } => {
                let (frames, c_in) = self.value(*x).dims2();
                let ws = self.value(*w).shape().to_vec();
                let (kernel, c_out) = (ws[0], ws[2]);
                let gv = ArrayView2::from_shape((frames, c_out), g).unwrap();
                if self.wants(*w) {
                    let cv = ArrayView2::from_shape((frames, kernel * c_in), cols).unwrap();
                    let mut gw = vec![0.0; kernel * c_in * c_out];
                    let mut gwv = ArrayViewMut2::from_shape((kernel * c_in, c_out), &mut gw).unwrap();
                    general_mat_mul(1.0, &cv.t(), &gv, 0.0, &mut gwv);
                    self.accumulate(*w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = self.reduce_bcast(g, *b, Bcast::Row, c_out);
                        self.accumulate(*b, gb);
                    }
                }
                if self.wants(*x) {
                    let wv =
                        ArrayView2::from_shape((kernel * c_in, c_out), self.value(*w).data()).unwrap();
                    let mut gcols = vec![0.0; frames * kernel * c_in];
                    let mut gcv =
                        ArrayViewMut2::from_shape((frames, kernel * c_in), &mut gcols).unwrap();
                    general_mat_mul(1.0, &gv, &wv.t(), 0.0, &mut gcv);
                    let gx = col2im(&gcols, frames, c_in, kernel, *dilation);
                    self.accumulate(*x, gx);
                }
            }
            Op::GatedTanhSigmoid(x) => {
                let tx = self.value(*x);
                let (rows, cols) = tx.dims2();
                let half = cols / 2;
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = tx.row(r);
                    for c in 0..half {
                        let th = row[c].tanh();
                        let sg = sigmoid(row[half + c]);
                        let go = g[r * half + c];
                        gx[r * cols + c] = go * sg * (1.0 - th * th);
                        gx[r * cols + half + c] = go * th * sg * (1.0 - sg);
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(*x, gx);
            }
            Op::Tanh(x) => {
                let out = Arc::clone(&self.nodes[i].value);
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(*x, gx);
            }
            Op::Sigmoid(x) => {
                let out = Arc::clone(&self.nodes[i].value);
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*x).cols();
                let rows = inv_std.len();
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; cols];
                    for (k, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        gg[k % cols] += gv * h;
                    }
                    self.accumulate(*gamma, gg);
                }
                if self.wants(*beta) {
                    let gb = self.reduce_bcast(g, *beta, Bcast::Row, cols);
                    self.accumulate(*beta, gb);
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let off = r * cols;
                        let dxhat: Vec<f64> = (0..cols).map(|c| g[off + c] * gam[c]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat[off..off + cols]).map(|(d, h)| d * h).sum();
                        for c in 0..cols {
                            gx[off + c] =
                                inv_std[r] / n * (n * dxhat[c] - s1 - xhat[off + c] * s2);
                        }
                    }
                    self.accumulate(*x, gx);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let dim = tt.cols();
                let mut gt = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(&g[r * dim..(r + 1) * dim])
                        .for_each(|(o, v)| *o += v);
                }
                self.accumulate(*table, gt);
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let diff: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| 2.0 * (x - y) / n * g[0])
                    .collect();
                if self.wants(*b) {
                    self.accumulate(*b, diff.iter().map(|v| -v).collect());
                }
                self.accumulate(*a, diff);
            }
            Op::L1(a, b) => {
                let n = self.value(*a).len() as f64;
                let sign: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| signum0(x - y) / n * g[0])
                    .collect();
                if self.wants(*b) {
                    self.accumulate(*b, sign.iter().map(|v| -v).collect());
                }
                self.accumulate(*a, sign);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(*a, vec![g[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(*a, vec![g[0]; n]);
            }
            Op::Concat { parts, axis } => {
                let rank = self.value(parts[0]).rank();
                if rank == 1 || *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        self.accumulate(*p, g[off..off + n].to_vec());
                        off += n;
                    }
                } else {
                    let rows = self.value(parts[0]).rows();
                    let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
                    let mut col_off = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + col_off..r * total + col_off + c]);
                        }
                        self.accumulate(*p, gp);
                        col_off += c;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let mut gx = vec![0.0; tx.len()];
                if tx.rank() == 1 || *axis == 0 {
                    let c = if tx.rank() == 1 { 1 } else { tx.cols() };
                    gx[start * c..start * c + g.len()].copy_from_slice(g);
                } else {
                    let (rows, cols) = tx.dims2();
                    let len = g.len() / rows;
                    for r in 0..rows {
                        gx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::StraightThrough(x) => {
                self.accumulate(*x, g.to_vec());
            }
        }
        self.nodes[i].op = op;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn tap_offset(k: usize, kernel: usize, dilation: usize) -> isize {
    (k as isize - (kernel / 2) as isize) * dilation as isize
}

fn im2col(x: &[f64], frames: usize, c_in: usize, kernel: usize, dilation: usize) -> Vec<f64> {
    let width = kernel * c_in;
    let mut cols = vec![0.0; frames * width];
    for k in 0..kernel {
        let off = tap_offset(k, kernel, dilation);
        for t in 0..frames {
            let src = t as isize + off;
            if src < 0 || src >= frames as isize {
                continue;
            }
            let src = src as usize;
            cols[t * width + k * c_in..t * width + (k + 1) * c_in]
                .copy_from_slice(&x[src * c_in..(src + 1) * c_in]);
        }
    }
    cols
}

fn col2im(cols: &[f64], frames: usize, c_in: usize, kernel: usize, dilation: usize) -> Vec<f64> {
    let width = kernel * c_in;
    let mut x = vec![0.0; frames * c_in];
    for k in 0..kernel {
        let off = tap_offset(k, kernel, dilation);
        for t in 0..frames {
            let src = t as isize + off;
            if src < 0 || src >= frames as isize {
                continue;
            }
            let src = src as usize;
            x[src * c_in..(src + 1) * c_in]
                .iter_mut()
                .zip(&cols[t * width + k * c_in..t * width + (k + 1) * c_in])
                .for_each(|(a, b)| *a += b);
        }
    }
    x
}
