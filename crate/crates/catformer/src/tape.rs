//! Reverse-mode automatic differentiation on a linear tape.
//!
//! The tape owns an arena of flat f32 values. Leaves are snapshots of
//! external [`Tensor`]s; every operation validates shapes, checks its output
//! for non-finite values, and (when any input requires gradients) records a
//! backward rule. `backward` replays the rules in reverse, accumulating
//! gradients additively across fan-out.
//!
//! The spike nonlinearity is exact Heaviside in the forward pass with a
//! configurable surrogate derivative in the backward pass. A relaxed mode
//! replaces the forward step with the smooth sigmoid so end-to-end gradients
//! can be verified against finite differences; it exists only for testing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BN_EPS: f32 = 1e-5;

/// Index of a value in the tape arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Surrogate derivative family for the spike nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SurrogateKind {
    /// g(x) = 1 inside |x| <= width, 0 outside.
    Rectangular,
    /// g(x) = s(1-s)/width with s = sigmoid(x/width); the true derivative of
    /// the relaxed forward.
    SigmoidDerivative,
    /// g(x) = max(0, 1 - |x|/width).
    Triangular,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub width: f32,
}

impl SurrogateSpec {
    pub fn new(kind: SurrogateKind, width: f32) -> Result<Self> {
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::Domain(format!("surrogate width must be positive, got {width}")));
        }
        Ok(SurrogateSpec { kind, width })
    }

    pub fn rectangular(width: f32) -> Self {
        SurrogateSpec::new(SurrogateKind::Rectangular, width).unwrap()
    }

    /// Surrogate derivative g(x); symmetric and non-negative for all kinds.
    pub fn grad(&self, x: f32) -> f32 {
        let w = self.width;
        match self.kind {
            SurrogateKind::Rectangular => {
                if x.abs() <= w {
                    1.0
                } else {
                    0.0
                }
            }
            SurrogateKind::SigmoidDerivative => {
                // Evaluated on |x| so the even function is bitwise symmetric.
                let s = sigmoid(x.abs() / w);
                s * (1.0 - s) / w
            }
            SurrogateKind::Triangular => (1.0 - x.abs() / w).max(0.0),
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batch-normalization statistics source.
pub enum BnMode<'a> {
    /// Compute per-channel mean/variance from the current rows.
    Train,
    /// Use stored running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Per-channel statistics computed by a training-mode norm, for running-stat
/// updates in the owning layer.
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

struct Value {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
}

enum Op {
    Matmul { a: NodeId, b: NodeId, out: NodeId, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Sub { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Scale { x: NodeId, factor: f32, out: NodeId },
    AddBias { x: NodeId, bias: NodeId, out: NodeId, cols: usize },
    SubChannel { x: NodeId, c: NodeId, out: NodeId, cols: usize },
    MulChannel { x: NodeId, c: NodeId, out: NodeId, cols: usize },
    Relu { x: NodeId, out: NodeId },
    Heaviside { x: NodeId, out: NodeId, spec: SurrogateSpec, relaxed: bool },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        out: NodeId,
        mean: Vec<f32>,
        istd: Vec<f32>,
        train: bool,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        out: NodeId,
        batch: usize,
        tokens: usize,
        heads: usize,
        scale: f32,
    },
    /// out[r] = x[r] + tile[r % tile_rows]: per-token broadcast over batch.
    AddTiled { x: NodeId, tile: NodeId, out: NodeId, tile_rows: usize, cols: usize },
    MeanPool { x: NodeId, out: NodeId, group: usize },
    SumAll { x: NodeId, out: NodeId },
    CrossEntropy { logits: NodeId, out: NodeId, labels: Vec<usize>, softmax: Vec<f32> },
}

/// Recording tape for one computation graph.
pub struct Tape {
    values: Vec<Value>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    /// Register an external tensor as a leaf. Data is snapshotted; gradients
    /// accumulate on the tape and are read back after `backward`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        debug_assert!(t.is_finite(), "leaf tensor contains non-finite values");
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Register constant data (no gradient path).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(Value { shape, data, grad: None, needs_grad });
        id
    }

    fn val(&self, id: NodeId) -> &Value {
        &self.values[id.0]
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.val(id).data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.val(id).shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.values[id.0].grad.as_deref()
    }

    /// Copy a value out of the arena as a standalone tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let v = self.val(id);
        Tensor::from_vec(v.shape.clone(), v.data.clone())
    }

    fn rows_cols(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        match *s {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![0, 0] }),
        }
    }

    fn finite_or(&self, data: &[f32], op: &'static str) -> Result<()> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn emit(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        needs_grad: bool,
        op: impl FnOnce(NodeId) -> Op,
    ) -> NodeId {
        let out = self.push(shape, data, needs_grad);
        if needs_grad {
            self.ops.push(op(out));
        }
        out
    }

    // ── elementwise and broadcast ops ───────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
        op: impl FnOnce(NodeId, NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.finite_or(&data, name)?;
        let ng = self.val(a).needs_grad || self.val(b).needs_grad;
        Ok(self.emit(self.shape(a).to_vec(), data, ng, |out| op(a, b, out)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale"));
        }
        let data: Vec<f32> = self.data(x).iter().map(|&v| v * factor).collect();
        self.finite_or(&data, "scale")?;
        let ng = self.val(x).needs_grad;
        Ok(self.emit(self.shape(x).to_vec(), data, ng, |out| Op::Scale { x, factor, out }))
    }

    fn channel_op(
        &mut self,
        name: &'static str,
        x: NodeId,
        c: NodeId,
        f: impl Fn(f32, f32) -> f32,
        op: impl FnOnce(NodeId, NodeId, NodeId, usize) -> Op,
    ) -> Result<NodeId> {
        let (_r, cols) = self.rows_cols(x, name)?;
        if self.val(c).data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(c).to_vec(),
            });
        }
        let cdata = &self.val(c).data;
        let data: Vec<f32> = self
            .val(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, cdata[i % cols]))
            .collect();
        self.finite_or(&data, name)?;
        let ng = self.val(x).needs_grad || self.val(c).needs_grad;
        Ok(self.emit(self.shape(x).to_vec(), data, ng, |out| op(x, c, out, cols)))
    }

    /// Row-broadcast add: [R,C] + [C].
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.channel_op("add_bias", x, bias, |a, b| a + b, |x, c, out, cols| Op::AddBias {
            x,
            bias: c,
            out,
            cols,
        })
    }

    /// Row-broadcast subtract: [R,C] - [C].
    pub fn sub_channel(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        self.channel_op("sub_channel", x, c, |a, b| a - b, |x, c, out, cols| Op::SubChannel {
            x,
            c,
            out,
            cols,
        })
    }

    /// Row-broadcast multiply: [R,C] * [C].
    pub fn mul_channel(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        self.channel_op("mul_channel", x, c, |a, b| a * b, |x, c, out, cols| Op::MulChannel {
            x,
            c,
            out,
            cols,
        })
    }

    /// Tile-broadcast add: x is [B*N, C], tile is [N, C]; each batch group
    /// of N rows receives the tile (positional offsets).
    pub fn add_tiled(&mut self, x: NodeId, tile: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x, "add_tiled")?;
        let (trows, tcols) = self.rows_cols(tile, "add_tiled")?;
        if tcols != cols || trows == 0 || rows % trows != 0 {
            return Err(Error::ShapeMismatch {
                op: "add_tiled",
                lhs: vec![rows, cols],
                rhs: vec![trows, tcols],
            });
        }
        let td = &self.val(tile).data;
        let data: Vec<f32> = self
            .val(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let r = i / cols;
                v + td[(r % trows) * cols + i % cols]
            })
            .collect();
        self.finite_or(&data, "add_tiled")?;
        let ng = self.val(x).needs_grad || self.val(tile).needs_grad;
        Ok(self.emit(vec![rows, cols], data, ng, |out| Op::AddTiled {
            x,
            tile,
            out,
            tile_rows: trows,
            cols,
        }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let ng = self.val(x).needs_grad;
        Ok(self.emit(self.shape(x).to_vec(), data, ng, |out| Op::Relu { x, out }))
    }

    // ── matmul ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = vec![0.0f32; m * n];
        matmul_into(self.data(a), self.data(b), &mut data, m, ka, n);
        self.finite_or(&data, "matmul")?;
        let ng = self.val(a).needs_grad || self.val(b).needs_grad;
        Ok(self.emit(vec![m, n], data, ng, |out| Op::Matmul { a, b, out, m, k: ka, n }))
    }

    // ── spike nonlinearity ──────────────────────────────────────────────

    /// Exact Heaviside forward (index fires at exactly 0), surrogate
    /// backward. With `relaxed`, forward is sigmoid(x/width) and backward its
    /// true derivative; used only by gradient tests.
    pub fn heaviside(&mut self, x: NodeId, spec: SurrogateSpec, relaxed: bool) -> Result<NodeId> {
        self.finite_or(&self.val(x).data, "heaviside")?;
        let data: Vec<f32> = if relaxed {
            self.data(x).iter().map(|&v| sigmoid(v / spec.width)).collect()
        } else {
            self.data(x).iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect()
        };
        let ng = self.val(x).needs_grad;
        Ok(self.emit(self.shape(x).to_vec(), data, ng, |out| Op::Heaviside {
            x,
            out,
            spec,
            relaxed,
        }))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Per-channel affine normalization of [R,C] rows. Training mode uses
    /// batch statistics (returned for running-stat updates); eval mode uses
    /// the provided running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let (rows, cols) = self.rows_cols(x, "batch_norm")?;
        if self.val(gamma).data.len() != cols || self.val(beta).data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![rows, cols],
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (mean, var, train, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f32; cols];
                let mut var = vec![0.0f32; cols];
                let xd = &self.val(x).data;
                for r in 0..rows {
                    for c in 0..cols {
                        mean[c] += xd[r * cols + c];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= rows as f32;
                }
                for r in 0..rows {
                    for c in 0..cols {
                        let d = xd[r * cols + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= rows as f32;
                }
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, true, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        lhs: vec![cols],
                        rhs: vec![mean.len()],
                    });
                }
                (mean.to_vec(), var.to_vec(), false, None)
            }
        };
        let istd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = &self.val(gamma).data;
        let b = &self.val(beta).data;
        let xd = &self.val(x).data;
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let xhat = (xd[r * cols + c] - mean[c]) * istd[c];
                data[r * cols + c] = g[c] * xhat + b[c];
            }
        }
        self.finite_or(&data, "batch_norm")?;
        let ng = self.val(x).needs_grad || self.val(gamma).needs_grad || self.val(beta).needs_grad;
        let id = self.emit(vec![rows, cols], data, ng, |out| Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            mean,
            istd,
            train,
        });
        Ok((id, stats))
    }

    // ── attention product ───────────────────────────────────────────────

    /// Per-sample, per-head token mixing without softmax:
    /// out = (Q Kᵀ) V * scale, computed head-wise on [batch*tokens, dim]
    /// activations.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        tokens: usize,
        heads: usize,
        scale: f32,
    ) -> Result<NodeId> {
        let (rows, dim) = self.rows_cols(q, "attention")?;
        for other in [k, v] {
            if self.shape(other) != self.shape(q) {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: self.shape(q).to_vec(),
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        if rows != batch * tokens || dim % heads != 0 {
            return Err(Error::Contract(format!(
                "attention layout: rows {rows} != batch {batch} * tokens {tokens}, or dim {dim} % heads {heads} != 0"
            )));
        }
        let dh = dim / heads;
        let mut data = vec![0.0f32; rows * dim];
        {
            let qd = &self.val(q).data;
            let kd = &self.val(k).data;
            let vd = &self.val(v).data;
            let mut qh = vec![0.0f32; tokens * dh];
            let mut kh = vec![0.0f32; tokens * dh];
            let mut vh = vec![0.0f32; tokens * dh];
            let mut a = vec![0.0f32; tokens * tokens];
            let mut oh = vec![0.0f32; tokens * dh];
            for b in 0..batch {
                for h in 0..heads {
                    gather_head(qd, &mut qh, b, h, tokens, dim, dh);
                    gather_head(kd, &mut kh, b, h, tokens, dim, dh);
                    gather_head(vd, &mut vh, b, h, tokens, dim, dh);
                    matmul_a_bt(&qh, &kh, &mut a, tokens, dh, tokens);
                    matmul_into(&a, &vh, &mut oh, tokens, tokens, dh);
                    for x in oh.iter_mut() {
                        *x *= scale;
                    }
                    scatter_head(&oh, &mut data, b, h, tokens, dim, dh);
                }
            }
        }
        self.finite_or(&data, "attention")?;
        let ng = self.val(q).needs_grad || self.val(k).needs_grad || self.val(v).needs_grad;
        Ok(self.emit(vec![rows, dim], data, ng, |out| Op::Attention {
            q,
            k,
            v,
            out,
            batch,
            tokens,
            heads,
            scale,
        }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Mean over consecutive groups of `group` rows: [R,C] -> [R/group, C].
    pub fn mean_pool(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(x, "mean_pool")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::Contract(format!("mean_pool: {rows} rows not divisible by group {group}")));
        }
        let out_rows = rows / group;
        let mut data = vec![0.0f32; out_rows * cols];
        let xd = &self.val(x).data;
        for r in 0..rows {
            let o = r / group;
            for c in 0..cols {
                data[o * cols + c] += xd[r * cols + c];
            }
        }
        let inv = 1.0 / group as f32;
        for v in data.iter_mut() {
            *v *= inv;
        }
        let ng = self.val(x).needs_grad;
        Ok(self.emit(vec![out_rows, cols], data, ng, |out| Op::MeanPool { x, out, group }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f32 = self.data(x).iter().sum();
        self.finite_or(&[s], "sum_all")?;
        let ng = self.val(x).needs_grad;
        Ok(self.emit(vec![1], vec![s], ng, |out| Op::SumAll { x, out }))
    }

    /// Mean cross-entropy against integer labels, stabilized by row-max
    /// subtraction.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.rows_cols(logits, "cross_entropy")?;
        if rows == 0 || labels.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        for &l in labels {
            if l >= cols {
                return Err(Error::LabelOutOfRange { label: l, classes: cols });
            }
        }
        let ld = &self.val(logits).data;
        let mut softmax = vec![0.0f32; rows * cols];
        let mut loss = 0.0f64;
        for r in 0..rows {
            let row = &ld[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                softmax[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                softmax[r * cols + c] /= z;
            }
            let p = softmax[r * cols + labels[r]];
            loss -= (p.max(f32::MIN_POSITIVE) as f64).ln();
        }
        let mean = (loss / rows as f64) as f32;
        self.finite_or(&[mean], "cross_entropy")?;
        let ng = self.val(logits).needs_grad;
        let labels = labels.to_vec();
        Ok(self.emit(vec![1], vec![mean], ng, |out| Op::CrossEntropy {
            logits,
            out,
            labels,
            softmax,
        }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss. Fills gradients for every leaf on
    /// the path that requires them; the loss seed is 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.values.len() {
            return Err(Error::Lookup(format!("node {} not on this tape", loss.0)));
        }
        if self.val(loss).data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.values[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, contrib: &[f32]) {
        if !self.values[id.0].needs_grad {
            return;
        }
        let v = &mut self.values[id.0];
        match &mut v.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => v.grad = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&mut self, idx: usize) {
        // Backward rules read saved forward data and accumulate into inputs.
        // Ops whose output never received a gradient are dead branches.
        macro_rules! dout {
            ($out:expr) => {
                match &self.values[$out.0].grad {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }
        // Take the op out to satisfy the borrow checker; put it back after.
        let op = std::mem::replace(&mut self.ops[idx], Op::SumAll {
            x: NodeId(0),
            out: NodeId(0),
        });
        match &op {
            Op::Matmul { a, b, out, m, k, n } => {
                let d = dout!(out);
                if self.values[a.0].needs_grad {
                    // dA = dOut · Bᵀ
                    let mut da = vec![0.0f32; m * k];
                    matmul_a_bt(&d, self.data(*b), &mut da, *m, *n, *k);
                    self.add_grad(*a, &da);
                }
                if self.values[b.0].needs_grad {
                    // dB = Aᵀ · dOut
                    let mut db = vec![0.0f32; k * n];
                    matmul_at_b(self.data(*a), &d, &mut db, *m, *k, *n);
                    self.add_grad(*b, &db);
                }
            }
            Op::Add { a, b, out } => {
                let d = dout!(out);
                self.add_grad(*a, &d);
                self.add_grad(*b, &d);
            }
            Op::Sub { a, b, out } => {
                let d = dout!(out);
                self.add_grad(*a, &d);
                if self.values[b.0].needs_grad {
                    let neg: Vec<f32> = d.iter().map(|v| -v).collect();
                    self.add_grad(*b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                let d = dout!(out);
                if self.values[a.0].needs_grad {
                    let da: Vec<f32> =
                        d.iter().zip(self.data(*b)).map(|(&g, &y)| g * y).collect();
                    self.add_grad(*a, &da);
                }
                if self.values[b.0].needs_grad {
                    let db: Vec<f32> =
                        d.iter().zip(self.data(*a)).map(|(&g, &x)| g * x).collect();
                    self.add_grad(*b, &db);
                }
            }
            Op::Scale { x, factor, out } => {
                let d = dout!(out);
                if self.values[x.0].needs_grad {
                    let dx: Vec<f32> = d.iter().map(|&g| g * factor).collect();
                    self.add_grad(*x, &dx);
                }
            }
            Op::AddBias { x, bias, out, cols } => {
                let d = dout!(out);
                self.add_grad(*x, &d);
                if self.values[bias.0].needs_grad {
                    let mut db = vec![0.0f32; *cols];
                    for (i, &g) in d.iter().enumerate() {
                        db[i % cols] += g;
                    }
                    self.add_grad(*bias, &db);
                }
            }
            Op::SubChannel { x, c, out, cols } => {
                let d = dout!(out);
                self.add_grad(*x, &d);
                if self.values[c.0].needs_grad {
                    let mut dc = vec![0.0f32; *cols];
                    for (i, &g) in d.iter().enumerate() {
                        dc[i % cols] -= g;
                    }
                    self.add_grad(*c, &dc);
                }
            }
            Op::MulChannel { x, c, out, cols } => {
                let d = dout!(out);
                if self.values[x.0].needs_grad {
                    let cd = &self.values[c.0].data;
                    let dx: Vec<f32> =
                        d.iter().enumerate().map(|(i, &g)| g * cd[i % cols]).collect();
                    self.add_grad(*x, &dx);
                }
                if self.values[c.0].needs_grad {
                    let xd = &self.values[x.0].data;
                    let mut dc = vec![0.0f32; *cols];
                    for (i, &g) in d.iter().enumerate() {
                        dc[i % cols] += g * xd[i];
                    }
                    self.add_grad(*c, &dc);
                }
            }
            Op::Relu { x, out } => {
                let d = dout!(out);
                if self.values[x.0].needs_grad {
                    let xd = &self.values[x.0].data;
                    let dx: Vec<f32> = d
                        .iter()
                        .zip(xd)
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.add_grad(*x, &dx);
                }
            }
            Op::Heaviside { x, out, spec, relaxed } => {
                let d = dout!(out);
                if self.values[x.0].needs_grad {
                    let dx: Vec<f32> = if *relaxed {
                        let od = &self.values[out.0].data;
                        d.iter()
                            .zip(od)
                            .map(|(&g, &s)| g * s * (1.0 - s) / spec.width)
                            .collect()
                    } else {
                        let xd = &self.values[x.0].data;
                        d.iter().zip(xd).map(|(&g, &v)| g * spec.grad(v)).collect()
                    };
                    self.add_grad(*x, &dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, out, mean, istd, train } => {
                let d = dout!(out);
                let cols = mean.len();
                let rows = d.len() / cols;
                let xd = &self.values[x.0].data;
                let gd = &self.values[gamma.0].data;
                // dbeta and dgamma are plain per-channel reductions.
                let mut dbeta = vec![0.0f32; cols];
                let mut dgamma = vec![0.0f32; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let g = d[r * cols + c];
                        let xhat = (xd[r * cols + c] - mean[c]) * istd[c];
                        dbeta[c] += g;
                        dgamma[c] += g * xhat;
                    }
                }
                if self.values[x.0].needs_grad {
                    let mut dx = vec![0.0f32; rows * cols];
                    if *train {
                        // dx = gamma*istd*(dy - mean(dy) - xhat*mean(dy*xhat))
                        let inv_r = 1.0 / rows as f32;
                        for r in 0..rows {
                            for c in 0..cols {
                                let g = d[r * cols + c];
                                let xhat = (xd[r * cols + c] - mean[c]) * istd[c];
                                dx[r * cols + c] = gd[c]
                                    * istd[c]
                                    * (g - dbeta[c] * inv_r - xhat * dgamma[c] * inv_r);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for c in 0..cols {
                                dx[r * cols + c] = d[r * cols + c] * gd[c] * istd[c];
                            }
                        }
                    }
                    self.add_grad(*x, &dx);
                }
                self.add_grad(*gamma, &dgamma);
                self.add_grad(*beta, &dbeta);
            }
            Op::Attention { q, k, v, out, batch, tokens, heads, scale } => {
                let d = dout!(out);
                let dim = self.values[q.0].shape[1];
                let dh = dim / heads;
                let t = *tokens;
                let qd = self.values[q.0].data.clone();
                let kd = self.values[k.0].data.clone();
                let vd = self.values[v.0].data.clone();
                let mut dq = vec![0.0f32; qd.len()];
                let mut dk = vec![0.0f32; kd.len()];
                let mut dv = vec![0.0f32; vd.len()];
                let mut qh = vec![0.0f32; t * dh];
                let mut kh = vec![0.0f32; t * dh];
                let mut vh = vec![0.0f32; t * dh];
                let mut doh = vec![0.0f32; t * dh];
                let mut a = vec![0.0f32; t * t];
                let mut da = vec![0.0f32; t * t];
                let mut scratch = vec![0.0f32; t * dh];
                for b in 0..*batch {
                    for h in 0..*heads {
                        gather_head(&qd, &mut qh, b, h, t, dim, dh);
                        gather_head(&kd, &mut kh, b, h, t, dim, dh);
                        gather_head(&vd, &mut vh, b, h, t, dim, dh);
                        gather_head(&d, &mut doh, b, h, t, dim, dh);
                        // A = Q Kᵀ; dV = s·Aᵀ·dO; dA = s·dO·Vᵀ; dQ = dA·K; dK = dAᵀ·Q
                        matmul_a_bt(&qh, &kh, &mut a, t, dh, t);
                        matmul_at_b(&a, &doh, &mut scratch, t, t, dh);
                        for x in scratch.iter_mut() {
                            *x *= scale;
                        }
                        scatter_head_add(&scratch, &mut dv, b, h, t, dim, dh);
                        matmul_a_bt(&doh, &vh, &mut da, t, dh, t);
                        for x in da.iter_mut() {
                            *x *= scale;
                        }
                        matmul_into(&da, &kh, &mut scratch, t, t, dh);
                        scatter_head_add(&scratch, &mut dq, b, h, t, dim, dh);
                        matmul_at_b(&da, &qh, &mut scratch, t, t, dh);
                        scatter_head_add(&scratch, &mut dk, b, h, t, dim, dh);
                    }
                }
                self.add_grad(*q, &dq);
                self.add_grad(*k, &dk);
                self.add_grad(*v, &dv);
            }
            Op::AddTiled { x, tile, out, tile_rows, cols } => {
                let d = dout!(out);
                self.add_grad(*x, &d);
                if self.values[tile.0].needs_grad {
                    let mut dt = vec![0.0f32; tile_rows * cols];
                    for (i, &g) in d.iter().enumerate() {
                        let r = i / cols;
                        dt[(r % tile_rows) * cols + i % cols] += g;
                    }
                    self.add_grad(*tile, &dt);
                }
            }
            Op::MeanPool { x, out, group } => {
                let d = dout!(out);
                if self.values[x.0].needs_grad {
                    let cols = self.values[out.0].shape[1];
                    let rows = self.values[x.0].shape[0];
                    let inv = 1.0 / *group as f32;
                    let mut dx = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        let o = r / group;
                        for c in 0..cols {
                            dx[r * cols + c] = d[o * cols + c] * inv;
                        }
                    }
                    self.add_grad(*x, &dx);
                }
            }
            Op::SumAll { x, out } => {
                let d = dout!(out);
                if self.values[x.0].needs_grad {
                    let dx = vec![d[0]; self.values[x.0].data.len()];
                    self.add_grad(*x, &dx);
                }
            }
            Op::CrossEntropy { logits, out, labels, softmax } => {
                let d = dout!(out);
                if self.values[logits.0].needs_grad {
                    let rows = labels.len();
                    let cols = softmax.len() / rows;
                    let scale = d[0] / rows as f32;
                    let mut dl = softmax.clone();
                    for (r, &lab) in labels.iter().enumerate() {
                        dl[r * cols + lab] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= scale;
                    }
                    self.add_grad(*logits, &dl);
                }
            }
        }
        self.ops[idx] = op;
    }
}

// ── flat matmul kernels ─────────────────────────────────────────────────

/// out = A·B with A [m,k] and B [k,n]; zero rows of A are skipped, which is
/// exact for finite inputs and pays off on sparse spike matrices.
pub fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out = A·Bᵀ with A [m,k] and B [n,k].
fn matmul_a_bt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
}

/// out = Aᵀ·B with A [m,k] and B [m,n].
fn matmul_at_b(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn gather_head(src: &[f32], dst: &mut [f32], b: usize, h: usize, tokens: usize, dim: usize, dh: usize) {
    for t in 0..tokens {
        let row = (b * tokens + t) * dim + h * dh;
        dst[t * dh..(t + 1) * dh].copy_from_slice(&src[row..row + dh]);
    }
}

fn scatter_head(src: &[f32], dst: &mut [f32], b: usize, h: usize, tokens: usize, dim: usize, dh: usize) {
    for t in 0..tokens {
        let row = (b * tokens + t) * dim + h * dh;
        dst[row..row + dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
    }
}

fn scatter_head_add(src: &[f32], dst: &mut [f32], b: usize, h: usize, tokens: usize, dim: usize, dh: usize) {
    for t in 0..tokens {
        let row = (b * tokens + t) * dim + h * dh;
        for (d, &s) in dst[row..row + dh].iter_mut().zip(&src[t * dh..(t + 1) * dh]) {
            *d += s;
        }
    }
}
