//! Reverse-mode autodiff over a flat operation tape.
//!
//! A forward pass records each op into the tape; `backward` walks the tape
//! in reverse and accumulates gradients into every node that (transitively)
//! depends on a gradient-requiring leaf. Reductions run in canonical index
//! order, so forward and backward passes are bit-deterministic.
//!
//! The op set is exactly what the networks here need: affine maps, valid
//! 2-d cross-correlation, ReLU, row standardization (the layer-norm core),
//! concatenation, row-wise cosine similarity, softmax cross-entropy and a
//! few reductions. No broadcasting beyond bias-add; reshape is explicit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// What to do when cosine similarity meets a zero-norm row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroNormPolicy {
    /// Fail the forward pass (default).
    #[default]
    Error,
    /// Emit similarity 0 with zero gradient for that row.
    Zero,
}

/// Row standardization epsilon (inside the square root).
pub const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddBias { x: usize, b: usize },
    MulRow { x: usize, s: usize },
    MatMul { a: usize, b: usize },
    Conv2d { x: usize, w: usize, bias: usize, stride: usize },
    Relu { x: usize },
    Standardize { x: usize, inv_std: Vec<f64> },
    Concat2 { a: usize, b: usize },
    Reshape { x: usize },
    RowsCosine { a: usize, b: usize, policy: ZeroNormPolicy },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
    SelectActions { q: usize, actions: Vec<usize> },
    SumAll { x: usize },
    MeanAll { x: usize },
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Operation tape. Build one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copy a tensor onto the tape. Gradient tracking follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push_node(
            t.values().to_vec(),
            t.shape().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// A non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(CoreError::dim(format!(
                "constant: shape {shape:?} wants {numel} values, got {}",
                values.len()
            )));
        }
        Ok(self.push_node(values, shape.to_vec(), false, Op::Leaf))
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push_node(&mut self, values: Vec<f64>, shape: Vec<usize>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            values,
            shape,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, values: Vec<f64>, shape: Vec<usize>, needs_grad: bool, op: Op) -> Result<NodeId> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::non_finite(format!("op produced NaN/Inf: {op:?}")));
        }
        Ok(self.push_node(values, shape, needs_grad, op))
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::dim(format!(
                "{what}: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── elementwise / broadcast ─────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push_op(values, shape, ng, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push_op(values, shape, ng, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push_op(values, shape, ng, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a.0);
        self.push_op(values, shape, ng, Op::Scale { a: a.0, c })
    }

    /// `[B,D] + [D]`, the only broadcast in the op set.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(CoreError::dim(format!("add_bias: {xs:?} + {bs:?}")));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let mut values = self.nodes[x.0].values.clone();
        for r in 0..rows {
            for c in 0..cols {
                values[r * cols + c] += self.nodes[b.0].values[c];
            }
        }
        let shape = vec![rows, cols];
        let ng = self.needs(x.0) || self.needs(b.0);
        self.push_op(values, shape, ng, Op::AddBias { x: x.0, b: b.0 })
    }

    /// `[B,D] * [D]` row broadcast, the layer-norm scale.
    pub fn mul_row(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if xs.len() != 2 || ss.len() != 1 || xs[1] != ss[0] {
            return Err(CoreError::dim(format!("mul_row: {xs:?} * {ss:?}")));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let mut values = self.nodes[x.0].values.clone();
        for r in 0..rows {
            for c in 0..cols {
                values[r * cols + c] *= self.nodes[s.0].values[c];
            }
        }
        let shape = vec![rows, cols];
        let ng = self.needs(x.0) || self.needs(s.0);
        self.push_op(values, shape, ng, Op::MulRow { x: x.0, s: s.0 })
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul_kernel(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push_op(values, vec![m, n], ng, Op::MatMul { a: a.0, b: b.0 })
    }

    /// `x[B,I] . W[I,O] + b[O]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Valid-padding cross-correlation. `x[B,C,H,W]`, `w[O,C,kh,kw]`,
    /// `bias[O]`; output spatial size `floor((H-k)/stride)+1`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(bias));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(CoreError::dim(format!("conv2d: x {xs:?}, w {ws:?}")));
        }
        let (bsz, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(CoreError::dim(format!("conv2d: {c} input channels vs kernel {wc}")));
        }
        if bs != [o] {
            return Err(CoreError::dim(format!("conv2d: bias {bs:?} vs {o} kernels")));
        }
        if kh > h || kw > wdt {
            return Err(CoreError::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{wdt}"
            )));
        }
        if stride == 0 {
            return Err(CoreError::argument("conv2d: stride must be >= 1"));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (wdt - kw) / stride + 1;
        let values = conv2d_forward(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            &self.nodes[bias.0].values,
            [bsz, c, h, wdt],
            [o, kh, kw],
            stride,
        );
        let ng = self.needs(x.0) || self.needs(w.0) || self.needs(bias.0);
        self.push_op(
            values,
            vec![bsz, o, oh, ow],
            ng,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.0,
                stride,
            },
        )
    }

    // ── nonlinearities and normalization ────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let values = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x.0);
        self.push_op(values, shape, ng, Op::Relu { x: x.0 })
    }

    /// Row-wise standardization to zero mean / unit variance
    /// (epsilon 1e-5 inside the square root). Input `[B,D]`.
    pub fn standardize(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] == 0 {
            return Err(CoreError::dim(format!("standardize: {xs:?}")));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let src = &self.nodes[x.0].values;
        let mut values = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / libm::sqrt(var + STANDARDIZE_EPS);
            inv_std[r] = istd;
            for c in 0..cols {
                values[r * cols + c] = (row[c] - mean) * istd;
            }
        }
        let ng = self.needs(x.0);
        self.push_op(values, vec![rows, cols], ng, Op::Standardize { x: x.0, inv_std })
    }

    /// Concatenate `[B,D1]` and `[B,D2]` along the feature axis.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(CoreError::dim(format!("concat_cols: {sa:?} ++ {sb:?}")));
        }
        let (rows, d1, d2) = (sa[0], sa[1], sb[1]);
        let mut values = Vec::with_capacity(rows * (d1 + d2));
        for r in 0..rows {
            values.extend_from_slice(&self.nodes[a.0].values[r * d1..(r + 1) * d1]);
            values.extend_from_slice(&self.nodes[b.0].values[r * d2..(r + 1) * d2]);
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push_op(values, vec![rows, d1 + d2], ng, Op::Concat2 { a: a.0, b: b.0 })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].values.len() {
            return Err(CoreError::dim(format!(
                "reshape: {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let values = self.nodes[x.0].values.clone();
        let ng = self.needs(x.0);
        self.push_op(values, shape.to_vec(), ng, Op::Reshape { x: x.0 })
    }

    // ── similarity and losses ───────────────────────────────────────

    /// Row-wise cosine similarity of two `[B,D]` tensors, yielding `[B]`.
    pub fn rows_cosine(&mut self, a: NodeId, b: NodeId, policy: ZeroNormPolicy) -> Result<NodeId> {
        self.check_same_shape(a, b, "rows_cosine")?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(CoreError::dim(format!("rows_cosine: {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let (va, vb) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let mut values = vec![0.0; rows];
        for r in 0..rows {
            let ra = &va[r * cols..(r + 1) * cols];
            let rb = &vb[r * cols..(r + 1) * cols];
            let na = libm::sqrt(ra.iter().map(|v| v * v).sum());
            let nb = libm::sqrt(rb.iter().map(|v| v * v).sum());
            if na == 0.0 || nb == 0.0 {
                match policy {
                    ZeroNormPolicy::Error => {
                        return Err(CoreError::zero_norm(format!("rows_cosine row {r}")))
                    }
                    ZeroNormPolicy::Zero => {
                        values[r] = 0.0;
                        continue;
                    }
                }
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            values[r] = dot / (na * nb);
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push_op(values, vec![rows], ng, Op::RowsCosine { a: a.0, b: b.0, policy })
    }

    /// Scalar cosine similarity of two `[D]` vectors.
    pub fn cosine(&mut self, a: NodeId, b: NodeId, policy: ZeroNormPolicy) -> Result<NodeId> {
        let d = self.shape(a).iter().product::<usize>();
        let a2 = self.reshape(a, &[1, d])?;
        let b2 = self.reshape(b, &[1, d])?;
        self.rows_cosine(a2, b2, policy)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(CoreError::dim(format!("softmax_cross_entropy: {s:?}")));
        }
        let (bsz, classes) = (s[0], s[1]);
        if labels.len() != bsz {
            return Err(CoreError::dim(format!(
                "softmax_cross_entropy: {bsz} rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(CoreError::index(format!(
                "softmax_cross_entropy: label {bad} out of range 0..{classes}"
            )));
        }
        let v = &self.nodes[logits.0].values;
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &v[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>()) + max;
            total -= row[label] - lse;
        }
        let ng = self.needs(logits.0);
        self.push_op(
            vec![total / bsz as f64],
            vec![1],
            ng,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        )
    }

    /// Pick `q[b, actions[b]]` per row, yielding `[B]`.
    pub fn select_actions(&mut self, q: NodeId, actions: &[usize]) -> Result<NodeId> {
        let s = self.shape(q);
        if s.len() != 2 || actions.len() != s[0] {
            return Err(CoreError::dim(format!(
                "select_actions: {s:?} with {} actions",
                actions.len()
            )));
        }
        let (bsz, n) = (s[0], s[1]);
        if let Some(bad) = actions.iter().find(|&&a| a >= n) {
            return Err(CoreError::index(format!(
                "select_actions: action {bad} out of range 0..{n}"
            )));
        }
        let v = &self.nodes[q.0].values;
        let values = (0..bsz).map(|r| v[r * n + actions[r]]).collect();
        let ng = self.needs(q.0);
        self.push_op(
            values,
            vec![bsz],
            ng,
            Op::SelectActions {
                q: q.0,
                actions: actions.to_vec(),
            },
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[x.0].values.iter().sum();
        let ng = self.needs(x.0);
        self.push_op(vec![total], vec![1], ng, Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].values.len();
        if n == 0 {
            return Err(CoreError::argument("mean_all: empty tensor"));
        }
        let total: f64 = self.nodes[x.0].values.iter().sum();
        let ng = self.needs(x.0);
        self.push_op(vec![total / n as f64], vec![1], ng, Op::MeanAll { x: x.0 })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate on every
    /// node whose subgraph contains a gradient-requiring leaf.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].values.len() != 1 {
            return Err(CoreError::contract(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &grad, &op);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn acc(&mut self, target: usize, delta: &[f64]) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let n = self.nodes[target].values.len();
        let grad = self.nodes[target].grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&mut self, node: usize, grad: &[f64], op: &Op) {
        match *op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.acc(a, grad);
                self.acc(b, grad);
            }
            Op::Sub { a, b } => {
                self.acc(a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.acc(b, &neg);
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[b].values)
                        .map(|(g, v)| g * v)
                        .collect();
                    self.acc(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a].values)
                        .map(|(g, v)| g * v)
                        .collect();
                    self.acc(b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.acc(a, &da);
            }
            Op::AddBias { x, b } => {
                self.acc(x, grad);
                if self.needs(b) {
                    let cols = self.nodes[b].values.len();
                    let rows = grad.len() / cols;
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += grad[r * cols + c];
                        }
                    }
                    self.acc(b, &db);
                }
            }
            Op::MulRow { x, s } => {
                let cols = self.nodes[s].values.len();
                let rows = grad.len() / cols;
                if self.needs(x) {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = grad[r * cols + c] * self.nodes[s].values[c];
                        }
                    }
                    self.acc(x, &dx);
                }
                if self.needs(s) {
                    let mut ds = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            ds[c] += grad[r * cols + c] * self.nodes[x].values[r * cols + c];
                        }
                    }
                    self.acc(s, &ds);
                }
            }
            Op::MatMul { a, b } => {
                let m = self.nodes[a].shape[0];
                let k = self.nodes[a].shape[1];
                let n = self.nodes[b].shape[1];
                if self.needs(a) {
                    // dA = G . B^T
                    let bv = &self.nodes[b].values;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = grad[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += g * bv[p * n + j];
                            }
                        }
                    }
                    self.acc(a, &da);
                }
                if self.needs(b) {
                    // dB = A^T . G
                    let av = &self.nodes[a].values;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += x * grad[i * n + j];
                            }
                        }
                    }
                    self.acc(b, &db);
                }
            }
            Op::Conv2d { x, w, bias, stride } => {
                let xs = self.nodes[x].shape.clone();
                let ws = self.nodes[w].shape.clone();
                let dims = [xs[0], xs[1], xs[2], xs[3]];
                let (bsz, c, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let oh = (h - kh) / stride + 1;
                let ow = (wdt - kw) / stride + 1;
                let k = c * kh * kw;
                let n = bsz * oh * ow;
                // gradient in [B*OH*OW, O] order for the matmuls below
                let mut gmat = vec![0.0; n * o];
                for bi in 0..bsz {
                    for i in 0..oh * ow {
                        for oc in 0..o {
                            gmat[(bi * oh * ow + i) * o + oc] =
                                grad[(bi * o + oc) * oh * ow + i];
                        }
                    }
                }
                if self.needs(x) {
                    // dcols = gmat [N,O] x w [O,K], then scatter back
                    let dcols = matmul_kernel(&gmat, &self.nodes[w].values, n, o, k);
                    let mut dx = vec![0.0; bsz * c * h * wdt];
                    col2im_add(&dcols, dims, [kh, kw], stride, &mut dx);
                    self.acc(x, &dx);
                }
                if self.needs(w) {
                    // dw [O,K] = gmat^T [O,N] x cols [N,K]
                    let cols = im2col(&self.nodes[x].values, dims, [kh, kw], stride);
                    let mut gt = vec![0.0; o * n];
                    for row in 0..n {
                        for oc in 0..o {
                            gt[oc * n + row] = gmat[row * o + oc];
                        }
                    }
                    let dw = matmul_kernel(&gt, &cols, o, n, k);
                    self.acc(w, &dw);
                }
                if self.needs(bias) {
                    let mut db = vec![0.0; o];
                    for bi in 0..bsz {
                        for oc in 0..o {
                            let base = ((bi * o + oc) * oh) * ow;
                            for idx in 0..oh * ow {
                                db[oc] += grad[base + idx];
                            }
                        }
                    }
                    self.acc(bias, &db);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[x].values)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc(x, &dx);
            }
            Op::Standardize { x, ref inv_std } => {
                // dx = istd * (g - mean(g) - xhat * mean(g * xhat)), per row.
                let cols = self.nodes[node].shape[1];
                let rows = self.nodes[node].shape[0];
                let xhat = &self.nodes[node].values;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let g = &grad[r * cols..(r + 1) * cols];
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let gmean = g.iter().sum::<f64>() / cols as f64;
                    let gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = inv_std[r] * (g[c] - gmean - xh[c] * gx);
                    }
                }
                self.acc(x, &dx);
            }
            Op::Concat2 { a, b } => {
                let d1 = self.nodes[a].shape[1];
                let d2 = self.nodes[b].shape[1];
                let rows = self.nodes[a].shape[0];
                if self.needs(a) {
                    let mut da = vec![0.0; rows * d1];
                    for r in 0..rows {
                        da[r * d1..(r + 1) * d1]
                            .copy_from_slice(&grad[r * (d1 + d2)..r * (d1 + d2) + d1]);
                    }
                    self.acc(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; rows * d2];
                    for r in 0..rows {
                        db[r * d2..(r + 1) * d2]
                            .copy_from_slice(&grad[r * (d1 + d2) + d1..(r + 1) * (d1 + d2)]);
                    }
                    self.acc(b, &db);
                }
            }
            Op::Reshape { x } => {
                self.acc(x, grad);
            }
            Op::RowsCosine { a, b, policy } => {
                let cols = self.nodes[a].shape[1];
                let rows = self.nodes[a].shape[0];
                let mut da = vec![0.0; rows * cols];
                let mut db = vec![0.0; rows * cols];
                for r in 0..rows {
                    let ra = &self.nodes[a].values[r * cols..(r + 1) * cols];
                    let rb = &self.nodes[b].values[r * cols..(r + 1) * cols];
                    let na = libm::sqrt(ra.iter().map(|v| v * v).sum());
                    let nb = libm::sqrt(rb.iter().map(|v| v * v).sum());
                    if na == 0.0 || nb == 0.0 {
                        debug_assert_eq!(policy, ZeroNormPolicy::Zero);
                        continue; // zero gradient for that row
                    }
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    let cos = dot / (na * nb);
                    let g = grad[r];
                    for c in 0..cols {
                        da[r * cols + c] = g * (rb[c] / (na * nb) - cos * ra[c] / (na * na));
                        db[r * cols + c] = g * (ra[c] / (na * nb) - cos * rb[c] / (nb * nb));
                    }
                }
                self.acc(a, &da);
                self.acc(b, &db);
            }
            Op::SoftmaxCrossEntropy { logits, ref labels } => {
                let classes = self.nodes[logits].shape[1];
                let bsz = self.nodes[logits].shape[0];
                let v = &self.nodes[logits].values;
                let g = grad[0] / bsz as f64;
                let mut dl = vec![0.0; bsz * classes];
                for (r, &label) in labels.iter().enumerate() {
                    let row = &v[r * classes..(r + 1) * classes];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|x| libm::exp(x - max)).collect();
                    let sum: f64 = exps.iter().sum();
                    for c in 0..classes {
                        let p = exps[c] / sum;
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        dl[r * classes + c] = g * (p - onehot);
                    }
                }
                self.acc(logits, &dl);
            }
            Op::SelectActions { q, ref actions } => {
                let n = self.nodes[q].shape[1];
                let mut dq = vec![0.0; self.nodes[q].values.len()];
                for (r, &a) in actions.iter().enumerate() {
                    dq[r * n + a] = grad[r];
                }
                self.acc(q, &dq);
            }
            Op::SumAll { x } => {
                let dx = vec![grad[0]; self.nodes[x].values.len()];
                self.acc(x, &dx);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x].values.len();
                let dx = vec![grad[0] / n as f64; n];
                self.acc(x, &dx);
            }
        }
    }
}

// ── shared kernels ──────────────────────────────────────────────────

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += x * brow[j];
            }
        }
    }
    out
}

/// Unroll conv windows into rows: `[B*OH*OW, C*KH*KW]`, row-major.
fn im2col(
    x: &[f64],
    [bsz, c, h, wdt]: [usize; 4],
    [kh, kw]: [usize; 2],
    stride: usize,
) -> Vec<f64> {
    let oh = (h - kh) / stride + 1;
    let ow = (wdt - kw) / stride + 1;
    let k = c * kh * kw;
    let mut cols = vec![0.0; bsz * oh * ow * k];
    for bi in 0..bsz {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * k;
                let mut dst = row;
                for ci in 0..c {
                    for ky in 0..kh {
                        let src = ((bi * c + ci) * h + oy * stride + ky) * wdt + ox * stride;
                        cols[dst..dst + kw].copy_from_slice(&x[src..src + kw]);
                        dst += kw;
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add column rows back into image layout (the im2col adjoint).
fn col2im_add(
    cols: &[f64],
    [bsz, c, h, wdt]: [usize; 4],
    [kh, kw]: [usize; 2],
    stride: usize,
    dx: &mut [f64],
) {
    let oh = (h - kh) / stride + 1;
    let ow = (wdt - kw) / stride + 1;
    let k = c * kh * kw;
    for bi in 0..bsz {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * k;
                let mut src = row;
                for ci in 0..c {
                    for ky in 0..kh {
                        let dst = ((bi * c + ci) * h + oy * stride + ky) * wdt + ox * stride;
                        for kx in 0..kw {
                            dx[dst + kx] += cols[src + kx];
                        }
                        src += kw;
                    }
                }
            }
        }
    }
}

fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    dims @ [bsz, c, h, wdt]: [usize; 4],
    [o, kh, kw]: [usize; 3],
    stride: usize,
) -> Vec<f64> {
    let _ = c;
    let oh = (h - kh) / stride + 1;
    let ow = (wdt - kw) / stride + 1;
    let k = dims[1] * kh * kw;
    let n = bsz * oh * ow;
    let cols = im2col(x, dims, [kh, kw], stride);
    // w is [O, K] row-major; transpose once so the matmul runs [N,K]x[K,O]
    let mut wt = vec![0.0; k * o];
    for oc in 0..o {
        for p in 0..k {
            wt[p * o + oc] = w[oc * k + p];
        }
    }
    let flat = matmul_kernel(&cols, &wt, n, k, o);
    // reorder [B*OH*OW, O] into [B, O, OH, OW] and add the bias
    let mut out = vec![0.0; bsz * o * oh * ow];
    for bi in 0..bsz {
        for i in 0..oh * ow {
            let src = (bi * oh * ow + i) * o;
            for oc in 0..o {
                out[(bi * o + oc) * oh * ow + i] = flat[src + oc] + bias[oc];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap().with_grad()
    }

    #[test]
    fn affine_identity_case() {
        // x = I2, W = I2, b = 0 -> I2
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let w = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn affine_hand_case() {
        // x=[[1,2]], W=[[1],[1]], b=[3] -> [[6]]
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(&t(&[2, 1], &[1.0, 1.0]));
        let b = tape.leaf(&t(&[1], &[3.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[6.0]);
    }

    #[test]
    fn affine_shape_mismatch_is_dim_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.leaf(&t(&[2, 1], &[1.0, 1.0]));
        assert!(matches!(tape.matmul(x, w), Err(CoreError::Dim(_))));
    }

    #[test]
    fn conv_one_by_one_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let w = tape.leaf(&t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.values(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn conv_all_ones_case() {
        // all-ones 2x2 kernel on all-ones 3x3 input, stride 1 -> 2x2 of 4s
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let w = tape.leaf(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.values(y), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv_kernel_larger_than_input_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let w = tape.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        assert!(matches!(tape.conv2d(x, w, b, 1), Err(CoreError::Dim(_))));
    }

    #[test]
    fn cosine_of_self_is_one_orthogonal_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[3], &[1.0, 2.0, -1.0]));
        let c = tape.cosine(a, a, ZeroNormPolicy::Error).unwrap();
        assert!((tape.scalar_value(c) - 1.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 0.0]));
        let b = tape.leaf(&t(&[2], &[0.0, 1.0]));
        let c = tape.cosine(a, b, ZeroNormPolicy::Error).unwrap();
        assert_eq!(tape.scalar_value(c), 0.0);
    }

    #[test]
    fn cosine_zero_norm_policy() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let b = tape.leaf(&t(&[2], &[1.0, 0.0]));
        assert!(matches!(
            tape.cosine(a, b, ZeroNormPolicy::Error),
            Err(CoreError::ZeroNorm(_))
        ));
        let c = tape.cosine(a, b, ZeroNormPolicy::Zero).unwrap();
        assert_eq!(tape.scalar_value(c), 0.0);
        tape.backward(c).unwrap();
        assert!(tape.grad(b).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 5], &[0.3; 5]));
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!((tape.scalar_value(loss) - 1.6094379124341003).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_dominant_logit_loss_vanishes() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 5], &[40.0, 0.0, 0.0, 0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.scalar_value(loss) < 1e-12);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 5], &[0.0; 5]));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[5]),
            Err(CoreError::Index(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero_and_shift_passes_through() {
        // constant row, scale=1, shift=0 -> zeros; scale=0, shift=c -> c
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 4], &[3.0; 4]));
        let sd = tape.standardize(x).unwrap();
        assert!(tape.values(sd).iter().all(|&v| v == 0.0));

        let scale = tape.leaf(&t(&[4], &[0.0; 4]));
        let shift = tape.leaf(&t(&[4], &[2.5; 4]));
        let x2 = tape.leaf(&t(&[1, 4], &[1.0, -7.0, 0.25, 9.0]));
        let sd2 = tape.standardize(x2).unwrap();
        let scaled = tape.mul_row(sd2, scale).unwrap();
        let shifted = tape.add_bias(scaled, shift).unwrap();
        assert!(tape.values(shifted).iter().all(|&v| v == 2.5));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mul_with_aliased_inputs_doubles_gradient() {
        // d/dx sum(x*x) = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn no_grad_leaf_gets_none() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.leaf(&t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum_all(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(y).unwrap(), &[1.0, 2.0]);
    }
}
