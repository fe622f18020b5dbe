//! Reverse-mode gradient tape over dense tensors.
//!
//! Operations are recorded in execution order as they are applied, so the
//! node list is already a topological order and `backward` is a single
//! reverse sweep. Only leaf, variable and parameter nodes keep their
//! gradients after the sweep.

use crate::error::{KwsError, Result};
use crate::tensor::{add_into, axpy, dot, gemm_acc, transpose, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    VecMat(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Row(NodeId, usize),
    StackRows(Vec<NodeId>),
    Concat(Vec<NodeId>),
    GruBlend {
        z: NodeId,
        prev: NodeId,
        cand: NodeId,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    },
    ChannelsToFeatures(NodeId),
    NormalizeRows(NodeId, f64),
    SubIdentity(NodeId),
    SumSquares(NodeId),
    NegLogPick {
        input: NodeId,
        index: usize,
        floor: f64,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Free input that receives a gradient.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Trainable parameter identified by its index in the parameter store.
    pub fn param(&mut self, index: usize, value: Tensor) -> NodeId {
        self.push(value, Op::Param(index), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dims");
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_nt inner dims");
        let mut out = vec![0.0; m * n];
        if m * n >= 256 {
            let bt = transpose(bv.data(), n, k);
            gemm_acc(av.data(), &bt, &mut out, m, k, n);
        } else {
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = dot(av.row(i), bv.row(j));
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMulNt(a, b), rg)
    }

    /// Matrix times column vector: `[m,n] · [n] -> [m]`.
    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> NodeId {
        let (av, xv) = (self.value(a), self.value(x));
        assert_eq!(av.cols(), xv.len(), "matvec dims");
        let out: Vec<f64> = (0..av.rows()).map(|i| dot(av.row(i), xv.data())).collect();
        let rg = self.rg(&[a, x]);
        self.push(Tensor::vector(out), Op::MatVec(a, x), rg)
    }

    /// Row vector times matrix: `[m] · [m,n] -> [n]`.
    pub fn vecmat(&mut self, x: NodeId, a: NodeId) -> NodeId {
        let (xv, av) = (self.value(x), self.value(a));
        assert_eq!(av.rows(), xv.len(), "vecmat dims");
        let mut out = vec![0.0; av.cols()];
        for (i, &xi) in xv.data().iter().enumerate() {
            axpy(xi, av.row(i), &mut out);
        }
        let rg = self.rg(&[x, a]);
        self.push(Tensor::vector(out), Op::VecMat(x, a), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds `bias` (length = last dim of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = bv.len();
        assert_eq!(av.shape().last().copied(), Some(n), "bias length");
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_exact_mut(n) {
            add_into(chunk, bv.data());
        }
        let rg = self.rg(&[a, bias]);
        self.push(out, Op::AddBias(a, bias), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_in_place(factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(av.shape(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let n = *av.shape().last().expect("softmax of scalar");
        let mut out = av.clone();
        if n > 0 {
            for chunk in out.data_mut().chunks_exact_mut(n) {
                softmax_in_place(chunk);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let out = Tensor::vector(self.value(a).row(i).to_vec());
        let rg = self.rg(&[a]);
        self.push(out, Op::Row(a, i), rg)
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        let n = rows.first().map_or(0, |r| self.value(*r).len());
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            let v = self.value(*r);
            assert_eq!(v.len(), n, "stack_rows lengths");
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&[rows.len(), n], data).unwrap();
        let rg = self.rg(rows);
        self.push(out, Op::StackRows(rows.to_vec()), rg)
    }

    /// Flattens and concatenates.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg)
    }

    /// GRU state update `(1 − z)∘prev + z∘cand`.
    pub fn gru_blend(&mut self, z: NodeId, prev: NodeId, cand: NodeId) -> NodeId {
        let (zv, pv, cv) = (self.value(z), self.value(prev), self.value(cand));
        let data = zv
            .data()
            .iter()
            .zip(pv.data())
            .zip(cv.data())
            .map(|((z, p), c)| (1.0 - z) * p + z * c)
            .collect();
        let rg = self.rg(&[z, prev, cand]);
        self.push(Tensor::vector(data), Op::GruBlend { z, prev, cand }, rg)
    }

    /// Valid cross-correlation of a single-channel `[T, F]` input with a
    /// `[C, 1, KT, KF]` kernel, time stride `stride`, frequency stride 1.
    /// Output is `[C, T', F']`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> NodeId {
        let out = conv2d_forward(self.value(input), self.value(kernel), self.value(bias), stride);
        let rg = self.rg(&[input, kernel, bias]);
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
            rg,
        )
    }

    /// `[C, T, F]` → `[T, C·F]`, feature index `c·F + f`.
    pub fn channels_to_features(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (c, t, f) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut data = vec![0.0; c * t * f];
        for ci in 0..c {
            for ti in 0..t {
                let src = &av.data()[(ci * t + ti) * f..(ci * t + ti + 1) * f];
                data[ti * c * f + ci * f..ti * c * f + (ci + 1) * f].copy_from_slice(src);
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(&[t, c * f], data).unwrap(),
            Op::ChannelsToFeatures(a),
            rg,
        )
    }

    /// Divides each row by `max(‖row‖₂, floor)`.
    pub fn normalize_rows(&mut self, a: NodeId, floor: f64) -> NodeId {
        let mut out = self.value(a).clone();
        let n = out.cols();
        if n > 0 {
            for row in out.data_mut().chunks_exact_mut(n) {
                let norm = dot(row, row).sqrt().max(floor);
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::NormalizeRows(a, floor), rg)
    }

    pub fn sub_identity(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let n = out.rows();
        assert_eq!(n, out.cols(), "sub_identity needs a square matrix");
        for i in 0..n {
            out.data_mut()[i * n + i] -= 1.0;
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SubIdentity(a), rg)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = dot(v.data(), v.data());
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// `−ln(max(input[index], floor))`.
    pub fn neg_log_pick(&mut self, input: NodeId, index: usize, floor: f64) -> NodeId {
        let p = self.value(input).data()[index];
        let rg = self.rg(&[input]);
        self.push(
            Tensor::scalar(-p.max(floor).ln()),
            Op::NegLogPick {
                input,
                index,
                floor,
            },
            rg,
        )
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut out = Tensor::zeros(self.value(terms[0].0).shape());
        for (id, w) in terms {
            let v = self.value(*id);
            assert_eq!(v.shape(), out.shape(), "weighted_sum shapes");
            axpy(*w, v.data(), out.data_mut());
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Backpropagates from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(KwsError::Tape("loss node not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(KwsError::Tape("backward needs a scalar loss".into()));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backpropagates given upstream gradients for arbitrary nodes.
    ///
    /// A tape can be swept once; call [`Tape::reset_grads`] to sweep again.
    pub fn backward_seeded(&mut self, seeds: &[(NodeId, Tensor)]) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(KwsError::Tape("backward before forward".into()));
        }
        if self.done {
            return Err(KwsError::Tape(
                "backward already ran on this tape; reset_grads first".into(),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        let mut last = 0;
        for (id, g) in seeds {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| KwsError::Tape("seed node not on this tape".into()))?;
            if node.value.shape() != g.shape() {
                return Err(KwsError::Shape(format!(
                    "seed gradient {:?} for node of shape {:?}",
                    g.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut self.grads[id.0], g.data());
            last = last.max(id.0);
        }
        for i in (0..=last).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let keep = matches!(self.nodes[i].op, Op::Leaf | Op::Param(_));
            self.propagate(i, &g);
            if keep {
                self.grads[i] = Some(g);
            }
        }
        self.done = true;
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.done = false;
    }

    /// Gradient of a leaf or parameter node after `backward`; zeros when the
    /// loss does not depend on it.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let shape = self.nodes[id.0].value.shape();
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).unwrap(),
            None => Tensor::zeros(shape),
        }
    }

    /// `(parameter index, gradient)` for every parameter node that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(p) => self.grads.get(i).and_then(Option::as_ref).map(|g| (p, g.as_slice())),
            _ => None,
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn slot(&mut self, id: NodeId) -> &mut Vec<f64> {
        let len = self.nodes[id.0].value.len();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn send(&mut self, id: NodeId, g: &[f64]) {
        if self.wants(id) {
            add_into(self.slot(id), g);
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.wants(a) {
                    let bt = transpose(self.value(b).data(), k, n);
                    let mut da = vec![0.0; m * k];
                    gemm_acc(g, &bt, &mut da, m, n, k);
                    self.send(a, &da);
                }
                if self.wants(b) {
                    let at = transpose(self.value(a).data(), m, k);
                    let mut db = vec![0.0; k * n];
                    gemm_acc(&at, g, &mut db, k, m, n);
                    self.send(b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).rows();
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_acc(g, self.value(b).data(), &mut da, m, n, k);
                    self.send(a, &da);
                }
                if self.wants(b) {
                    let gt = transpose(g, m, n);
                    let mut db = vec![0.0; n * k];
                    gemm_acc(&gt, self.value(a).data(), &mut db, n, m, k);
                    self.send(b, &db);
                }
            }
            Op::MatVec(a, x) => {
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                if self.wants(a) {
                    let xv = self.value(x).data().to_vec();
                    let slot = self.slot(a);
                    for r in 0..m {
                        axpy(g[r], &xv, &mut slot[r * n..(r + 1) * n]);
                    }
                }
                if self.wants(x) {
                    let mut dx = vec![0.0; n];
                    let av = self.value(a);
                    for r in 0..m {
                        axpy(g[r], av.row(r), &mut dx);
                    }
                    self.send(x, &dx);
                }
            }
            Op::VecMat(x, a) => {
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                if self.wants(x) {
                    let av = self.value(a);
                    let dx: Vec<f64> = (0..m).map(|r| dot(av.row(r), g)).collect();
                    self.send(x, &dx);
                }
                if self.wants(a) {
                    let xv = self.value(x).data().to_vec();
                    let slot = self.slot(a);
                    for (r, &xr) in xv.iter().enumerate() {
                        axpy(xr, g, &mut slot[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Add(a, b) => {
                self.send(a, g);
                self.send(b, g);
            }
            Op::AddBias(a, bias) => {
                self.send(a, g);
                if self.wants(bias) {
                    let n = self.value(bias).len();
                    let slot = self.slot(bias);
                    for chunk in g.chunks_exact(n) {
                        add_into(slot, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let d: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    self.send(a, &d);
                }
                if self.wants(b) {
                    let d: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.send(b, &d);
                }
            }
            Op::Scale(a, f) => {
                let d: Vec<f64> = g.iter().map(|v| v * f).collect();
                self.send(a, &d);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.send(a, &d);
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.send(a, &d);
            }
            Op::Relu(a) => {
                let y = self.nodes[i].value.data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                self.send(a, &d);
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let n = *self.nodes[i].value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                if n > 0 {
                    for ((dc, yc), gc) in d.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                        let s = dot(yc, gc);
                        for k in 0..n {
                            dc[k] = yc[k] * (gc[k] - s);
                        }
                    }
                }
                self.send(a, &d);
            }
            Op::Row(a, r) => {
                if self.wants(a) {
                    let n = g.len();
                    add_into(&mut self.slot(a)[r * n..(r + 1) * n], g);
                }
            }
            Op::StackRows(rows) => {
                let n = self.nodes[i].value.cols();
                for (r, id) in rows.iter().enumerate() {
                    self.send(*id, &g[r * n..(r + 1) * n]);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(p).len();
                    self.send(p, &g[off..off + len]);
                    off += len;
                }
            }
            Op::GruBlend { z, prev, cand } => {
                let zv = self.value(z).data().to_vec();
                if self.wants(z) {
                    let (pv, cv) = (self.value(prev).data(), self.value(cand).data());
                    let d: Vec<f64> = (0..g.len()).map(|k| g[k] * (cv[k] - pv[k])).collect();
                    self.send(z, &d);
                }
                if self.wants(prev) {
                    let d: Vec<f64> = g.iter().zip(&zv).map(|(g, z)| g * (1.0 - z)).collect();
                    self.send(prev, &d);
                }
                if self.wants(cand) {
                    let d: Vec<f64> = g.iter().zip(&zv).map(|(g, z)| g * z).collect();
                    self.send(cand, &d);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => self.conv2d_backward(i, g, input, kernel, bias, stride),
            Op::ChannelsToFeatures(a) => {
                let s = self.value(a).shape().to_vec();
                let (c, t, f) = (s[0], s[1], s[2]);
                let mut d = vec![0.0; c * t * f];
                for ci in 0..c {
                    for ti in 0..t {
                        d[(ci * t + ti) * f..(ci * t + ti + 1) * f]
                            .copy_from_slice(&g[ti * c * f + ci * f..ti * c * f + (ci + 1) * f]);
                    }
                }
                self.send(a, &d);
            }
            Op::NormalizeRows(a, floor) => {
                let x = self.value(a);
                let y = &self.nodes[i].value;
                let n = x.cols();
                let mut d = vec![0.0; x.len()];
                if n > 0 {
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let norm = dot(xr, xr).sqrt();
                        let dr = &mut d[r * n..(r + 1) * n];
                        if norm > floor {
                            let yg = dot(yr, gr);
                            for k in 0..n {
                                dr[k] = (gr[k] - yr[k] * yg) / norm;
                            }
                        } else {
                            for k in 0..n {
                                dr[k] = gr[k] / floor;
                            }
                        }
                    }
                }
                self.send(a, &d);
            }
            Op::SubIdentity(a) => self.send(a, g),
            Op::SumSquares(a) => {
                let d: Vec<f64> = self.value(a).data().iter().map(|x| 2.0 * x * g[0]).collect();
                self.send(a, &d);
            }
            Op::NegLogPick {
                input,
                index,
                floor,
            } => {
                if self.wants(input) {
                    let p = self.value(input).data()[index];
                    if p > floor {
                        self.slot(input)[index] -= g[0] / p;
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for (id, w) in terms {
                    if self.wants(id) {
                        let slot = self.slot(id);
                        axpy(w, g, slot);
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &mut self,
        out_id: usize,
        g: &[f64],
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) {
        let os = self.nodes[out_id].value.shape().to_vec();
        let (c, to, fo) = (os[0], os[1], os[2]);
        let ks = self.value(kernel).shape().to_vec();
        let (kt, kf) = (ks[2], ks[3]);
        let fi = self.value(input).cols();
        if self.wants(bias) {
            let db: Vec<f64> = (0..c).map(|ci| g[ci * to * fo..(ci + 1) * to * fo].iter().sum()).collect();
            self.send(bias, &db);
        }
        if self.wants(kernel) {
            let x = self.value(input).data();
            let mut dk = vec![0.0; c * kt * kf];
            for ci in 0..c {
                for t in 0..to {
                    let gr = &g[(ci * to + t) * fo..(ci * to + t + 1) * fo];
                    for a in 0..kt {
                        let xr = &x[(t * stride + a) * fi..(t * stride + a + 1) * fi];
                        for b in 0..kf {
                            dk[(ci * kt + a) * kf + b] += dot(gr, &xr[b..b + fo]);
                        }
                    }
                }
            }
            self.send(kernel, &dk);
        }
        if self.wants(input) {
            let k = self.value(kernel).data().to_vec();
            let slot = self.slot(input);
            for ci in 0..c {
                for t in 0..to {
                    let gr = &g[(ci * to + t) * fo..(ci * to + t + 1) * fo];
                    for a in 0..kt {
                        let row = (t * stride + a) * fi;
                        for b in 0..kf {
                            axpy(k[(ci * kt + a) * kf + b], gr, &mut slot[row + b..row + b + fo]);
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(s) => add_into(s, g),
        None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

pub(crate) fn conv2d_forward(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize) -> Tensor {
    let (t_in, f_in) = (x.rows(), x.cols());
    let ks = k.shape();
    let (c, kt, kf) = (ks[0], ks[2], ks[3]);
    assert_eq!(ks[1], 1, "single input channel");
    assert!(t_in >= kt && f_in >= kf, "input smaller than kernel");
    let to = (t_in - kt) / stride + 1;
    let fo = f_in - kf + 1;
    let mut out = vec![0.0; c * to * fo];
    let xd = x.data();
    let kd = k.data();
    for ci in 0..c {
        for t in 0..to {
            let orow = &mut out[(ci * to + t) * fo..(ci * to + t + 1) * fo];
            orow.fill(bias.data()[ci]);
            for a in 0..kt {
                let xr = &xd[(t * stride + a) * f_in..(t * stride + a + 1) * f_in];
                for b in 0..kf {
                    axpy(kd[(ci * kt + a) * kf + b], &xr[b..b + fo], orow);
                }
            }
        }
    }
    Tensor::new(&[c, to, fo], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_tensor(shape: &[usize], seed: &mut u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| lcg(seed)).collect()).unwrap()
    }

    /// Central-difference check of `build` w.r.t. each var input.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss).unwrap();
        let eval = |inp: &[Tensor]| {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = inp.iter().map(|x| t.var(x.clone())).collect();
            let l = build(&mut t, &ids);
            t.value(l).item()
        };
        let h = 1e-6;
        for (k, id) in ids.iter().enumerate() {
            let g = tape.grad(*id);
            for j in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[j];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} elem {j}: fd {fd} vs tape {an}"
                );
            }
        }
    }

    // Projects any node onto a scalar with fixed random weights so every
    // output element contributes.
    fn project(t: &mut Tape, x: NodeId, seed: u64) -> NodeId {
        let shape = t.value(x).shape().to_vec();
        let n = t.value(x).len();
        let mut s = seed;
        let w = Tensor::new(&shape, (0..n).map(|_| lcg(&mut s)).collect()).unwrap();
        let w = t.constant(w);
        let p = t.mul(x, w);
        let flat = t.concat(&[p]);
        let ones = t.constant(Tensor::full(&[n], 1.0));
        let ones = t.stack_rows(&[ones]);
        let v = t.matvec(ones, flat);
        v
    }

    #[test]
    fn matmul_family_gradients() {
        let mut s = 1;
        let a = rand_tensor(&[3, 4], &mut s);
        let b = rand_tensor(&[4, 5], &mut s);
        let bt = rand_tensor(&[5, 4], &mut s);
        check(vec![a.clone(), b], |t, ids| {
            let y = t.matmul(ids[0], ids[1]);
            project(t, y, 9)
        });
        check(vec![a.clone(), bt], |t, ids| {
            let y = t.matmul_nt(ids[0], ids[1]);
            project(t, y, 9)
        });
        let x = rand_tensor(&[4], &mut s);
        check(vec![a.clone(), x], |t, ids| {
            let y = t.matvec(ids[0], ids[1]);
            project(t, y, 3)
        });
        let x3 = rand_tensor(&[3], &mut s);
        check(vec![x3, a], |t, ids| {
            let y = t.vecmat(ids[0], ids[1]);
            project(t, y, 4)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut s = 2;
        let a = rand_tensor(&[2, 3], &mut s);
        let b = rand_tensor(&[2, 3], &mut s);
        let bias = rand_tensor(&[3], &mut s);
        check(vec![a.clone(), b.clone(), bias], |t, ids| {
            let m = t.mul(ids[0], ids[1]);
            let s1 = t.sigmoid(m);
            let th = t.tanh(ids[1]);
            let r = t.relu(ids[0]);
            let sum = t.add(s1, th);
            let sum = t.add(sum, r);
            let sum = t.add_bias(sum, ids[2]);
            let sc = t.scale(sum, -0.7);
            let sm = t.softmax(sc);
            project(t, sm, 5)
        });
    }

    #[test]
    fn structural_gradients() {
        let mut s = 3;
        let a = rand_tensor(&[3, 4], &mut s);
        let z = rand_tensor(&[4], &mut s);
        let p = rand_tensor(&[4], &mut s);
        let c = rand_tensor(&[4], &mut s);
        check(vec![a, z, p, c], |t, ids| {
            let r0 = t.row(ids[0], 0);
            let r2 = t.row(ids[0], 2);
            let zs = t.sigmoid(ids[1]);
            let h = t.gru_blend(zs, ids[2], ids[3]);
            let st = t.stack_rows(&[r0, h, r2]);
            let n = t.normalize_rows(st, 1e-8);
            let gm = t.matmul_nt(n, n);
            let si = t.sub_identity(gm);
            let ss = t.sum_squares(si);
            let cat = t.concat(&[r0, ids[3]]);
            let cat = t.softmax(cat);
            let nl = t.neg_log_pick(cat, 2, 1e-12);
            t.weighted_sum(&[(ss, 0.3), (nl, 1.5)])
        });
    }

    #[test]
    fn conv_gradients() {
        let mut s = 4;
        let x = rand_tensor(&[9, 6], &mut s);
        let k = rand_tensor(&[2, 1, 3, 4], &mut s);
        let b = rand_tensor(&[2], &mut s);
        check(vec![x, k, b], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 2);
            let y = t.channels_to_features(y);
            project(t, y, 7)
        });
    }

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut t = Tape::new();
        let p = t.param(0, Tensor::new(&[2, 3], vec![0.5; 6]).unwrap());
        let ones = t.constant(Tensor::full(&[6], 1.0));
        let flat = t.concat(&[p]);
        let ones = t.stack_rows(&[ones]);
        let l = t.matvec(ones, flat);
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).data(), &[1.0; 6]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(0, Tensor::full(&[3], 2.0));
        let q = t.param(1, Tensor::full(&[3], 1.0));
        let l = t.sum_squares(p);
        t.backward(l).unwrap();
        assert_eq!(t.grad(q).data(), &[0.0; 3]);
        assert_eq!(t.grad(p).data(), &[4.0; 3]);
    }

    #[test]
    fn backward_twice_is_error_until_reset() {
        let mut t = Tape::new();
        let p = t.var(Tensor::full(&[2], 1.0));
        let l = t.sum_squares(p);
        t.backward(l).unwrap();
        assert!(t.backward(l).is_err());
        t.reset_grads();
        t.backward(l).unwrap();
        assert_eq!(t.grad(p).data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_on_empty_tape_is_error() {
        let mut t = Tape::new();
        let mut other = Tape::new();
        let l = other.var(Tensor::scalar(1.0));
        assert!(t.backward(l).is_err());
    }

    #[test]
    fn normalize_rows_floor_guard() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[2, 3]));
        let n = t.normalize_rows(z, 1e-8);
        assert!(t.value(n).data().iter().all(|v| *v == 0.0));
    }
}
