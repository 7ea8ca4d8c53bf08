//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] is an append-only arena of evaluated nodes. Forward operations
//! push a node holding the result value plus the recipe that produced it;
//! [`Tape::backward`] walks the arena once in reverse, applying each
//! operation's vector-Jacobian product. The tape is rebuilt for every
//! forward pass, so data-dependent shapes (variable caption lengths) need
//! no special handling.
//!
//! Gradients are only allocated for nodes with `requires_grad`; frozen
//! parameters therefore never receive a gradient buffer.

use crate::error::{Error, Result};
use crate::param::ParamRegistry;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Neg,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Bin { kind: BinKind, a: Var, b: Var },
    Un { kind: UnKind, x: Var },
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    Reshape { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    BroadcastRows { v: Var, n: usize },
    L2NormalizeRows { x: Var, eps: f64 },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// Registry entries leased onto this tape, for gradient write-back.
    /// One binding per name: repeated leases return the cached node, so
    /// every use contributes to a single gradient buffer.
    bindings: Vec<(String, Var)>,
    param_cache: std::collections::HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Lease a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], false, Op::Leaf)
    }

    /// Lease a registered parameter onto the tape. The node requires a
    /// gradient exactly when the entry is trainable, and the binding is
    /// remembered so [`Tape::write_grads`] can push gradients back.
    /// Repeated leases of the same name share one node.
    pub fn param(&mut self, reg: &ParamRegistry, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let entry = reg
            .entry(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        let v = self.push(
            entry.tensor.shape().to_vec(),
            entry.tensor.data().to_vec(),
            entry.trainable,
            Op::Leaf,
        );
        self.bindings.push((name.to_string(), v));
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node invariant")
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() == 1 {
            Ok(n.data[0])
        } else {
            Err(Error::Contract(format!("item() on node of shape {:?}", n.shape)))
        }
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => (s[0], s[1]),
            1 => (1, s[0]),
            _ => (1, 1),
        }
    }

    // ── Forward operations ──────────────────────────────────────────

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        if self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 || ka != kb {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let out = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose of {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_raw(&self.nodes[x.0].data, m, n);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, m], out, rg, Op::Transpose { x }))
    }

    /// Max-subtracted softmax along `axis` (0 or 1 on matrices, 0 on vectors).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        let mut out = self.nodes[x.0].data.clone();
        for_each_lane_mut(&mut out, &shape, axis, softmax_lane);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::Softmax { x, axis }))
    }

    /// log(softmax(x)) along `axis`, evaluated stably.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.nodes[x.0].shape.clone();
        let mut out = self.nodes[x.0].data.clone();
        for_each_lane_mut(&mut out, &shape, axis, log_softmax_lane);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::LogSoftmax { x, axis }))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.nodes[x.0].shape.len().max(1);
        if axis >= rank {
            return Err(Error::Dimension(format!(
                "axis {axis} out of range for shape {:?}",
                self.nodes[x.0].shape
            )));
        }
        Ok(())
    }

    /// Per-row normalization over the last extent, then affine `gain, bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.rows_cols(x);
        if self.nodes[gain.0].data.len() != d || self.nodes[bias.0].data.len() != d {
            return Err(Error::Dimension(format!(
                "layernorm gain/bias of {:?}/{:?} against last extent {d}",
                self.nodes[gain.0].shape, self.nodes[bias.0].shape
            )));
        }
        let mut out = vec![0.0; rows * d];
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gain.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Min, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Max, a, b)
    }

    /// Pointwise binary op. Broadcasts a `[d]` vector over the rows of an
    /// `[n×d]` matrix and a scalar over anything; other shape pairs must
    /// match exactly.
    pub fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let plan = broadcast_plan(&self.nodes[a.0].shape, &self.nodes[b.0].shape).ok_or_else(
            || {
                Error::Dimension(format!(
                    "{kind:?} of {:?} and {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ))
            },
        )?;
        let out_shape = plan.out_shape.clone();
        let n = out_shape.iter().product::<usize>();
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let x = ad[plan.index_a(i)];
            let y = bd[plan.index_b(i)];
            *o = apply_bin(kind, x, y);
        }
        if kind == BinKind::Div && out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("division produced a non-finite value".into()));
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out_shape, out, rg, Op::Bin { kind, a, b }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Log, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnKind::Neg, x)
    }

    pub fn unary(&mut self, kind: UnKind, x: Var) -> Result<Var> {
        if kind == UnKind::Log {
            if let Some(bad) = self.nodes[x.0].data.iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| apply_un(kind, v)).collect();
        if kind == UnKind::Exp && out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("exp overflowed to non-finite".into()));
        }
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::Un { kind, x }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, rg, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, rg, Op::AddConst { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![], vec![s], rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![], vec![s / n as f64], rg, Op::MeanAll { x })
    }

    /// Same data, new extents. Element count must be preserved.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].data.len() {
            return Err(Error::Dimension(format!(
                "reshape of {:?} to {:?}",
                self.nodes[x.0].shape, shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Reshape { x }))
    }

    /// Select rows of a matrix by index; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.rows_cols(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("row index {bad} out of {rows}")));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![idx.len(), d], out, rg, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let d = self.rows_cols(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != d {
                return Err(Error::Dimension(format!(
                    "concat_rows column mismatch: {d} vs {c}"
                )));
            }
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.nodes[p.0].requires_grad;
        }
        Ok(self.push(vec![rows, d], out, rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.rows_cols(x);
        if start + len > d {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {d} columns",
                start + len
            )));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * d + start..r * d + start + len]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![rows, len], out, rg, Op::SliceCols { x, start, len }))
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.rows_cols(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols row mismatch: {rows} vs {r}"
                )));
            }
            widths.push(c);
            total += c;
            rg |= self.nodes[p.0].requires_grad;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (k, &p) in parts.iter().enumerate() {
                let c = widths[k];
                let pd = &self.nodes[p.0].data;
                out.extend_from_slice(&pd[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(vec![rows, total], out, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Replicate a `[d]` vector into `n` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 1 {
            return Err(Error::Dimension(format!("broadcast_rows of {s:?}")));
        }
        let d = s[0];
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&self.nodes[v.0].data);
        }
        let rg = self.nodes[v.0].requires_grad;
        Ok(self.push(vec![n, d], out, rg, Op::BroadcastRows { v, n }))
    }

    /// Scale each row to unit L2 norm: `x_r / sqrt(|x_r|^2 + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.rows_cols(x);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for c in 0..d {
                out[r * d + c] = row[c] / norm;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::L2NormalizeRows { x, eps }))
    }

    // ── Backward pass ───────────────────────────────────────────────

    /// Reverse traversal from a scalar loss. Populates gradient buffers for
    /// every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Gradient buffer of a node, if one was populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy accumulated gradients back into trainable registry entries.
    /// Frozen entries are left untouched (no gradient buffer at all).
    pub fn write_grads(&self, reg: &mut ParamRegistry) -> Result<()> {
        for (name, var) in &self.bindings {
            let entry = reg
                .entry_mut(name)
                .ok_or_else(|| Error::Contract(format!("parameter '{name}' vanished")))?;
            if !entry.trainable {
                continue;
            }
            match self.grad(*var) {
                Some(g) => entry.tensor.grad = Some(g.to_vec()),
                None => entry.tensor.grad = Some(vec![0.0; entry.tensor.numel()]),
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Bin { kind, a, b } => self.backward_bin(kind, a, b, id, g),
            Op::Un { kind, x } => {
                let xd = &self.nodes[x.0].data;
                let od = &self.nodes[id].data;
                let gx: Vec<f64> = match kind {
                    UnKind::Relu => xd.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect(),
                    UnKind::Sigmoid => od.iter().zip(g).map(|(&s, &g)| g * s * (1.0 - s)).collect(),
                    UnKind::Exp => od.iter().zip(g).map(|(&e, &g)| g * e).collect(),
                    UnKind::Log => xd.iter().zip(g).map(|(&x, &g)| g / x).collect(),
                    UnKind::Neg => g.iter().map(|&g| -g).collect(),
                };
                self.accumulate(x, &gx);
            }
            Op::Matmul { a, b } => {
                let (m, k) = self.rows_cols(a);
                let n = self.rows_cols(b).1;
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(&self.nodes[b.0].data, k, n);
                    let ga = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let at = transpose_raw(&self.nodes[a.0].data, m, k);
                    let gb = matmul_raw(&at, g, k, m, n);
                    self.accumulate(b, &gb);
                }
            }
            Op::Transpose { x } => {
                let (m, n) = self.rows_cols(x);
                let gx = transpose_raw(g, n, m);
                self.accumulate(x, &gx);
            }
            Op::Softmax { x, axis } => {
                let shape = self.nodes[id].shape.clone();
                let s = self.nodes[id].data.clone();
                let mut gx = g.to_vec();
                for_each_lane_pair_mut(&mut gx, &s, &shape, axis, |glane, slane| {
                    let dot: f64 = glane.iter().zip(slane.iter()).map(|(g, s)| g * s).sum();
                    for (g, s) in glane.iter_mut().zip(slane) {
                        *g = s * (*g - dot);
                    }
                });
                self.accumulate(x, &gx);
            }
            Op::LogSoftmax { x, axis } => {
                let shape = self.nodes[id].shape.clone();
                let ls = self.nodes[id].data.clone();
                let mut gx = g.to_vec();
                for_each_lane_pair_mut(&mut gx, &ls, &shape, axis, |glane, lslane| {
                    let gsum: f64 = glane.iter().sum();
                    for (g, ls) in glane.iter_mut().zip(lslane) {
                        *g -= ls.exp() * gsum;
                    }
                });
                self.accumulate(x, &gx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.backward_layernorm(x, gain, bias, eps, g);
            }
            Op::Scale { x, c } => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(x, &gx);
            }
            Op::AddConst { x } => self.accumulate(x, g),
            Op::SumAll { x } => {
                let gx = vec![g[0]; self.nodes[x.0].data.len()];
                self.accumulate(x, &gx);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].data.len();
                let gx = vec![g[0] / n as f64; n];
                self.accumulate(x, &gx);
            }
            Op::Reshape { x } => self.accumulate(x, g),
            Op::GatherRows { x, idx } => {
                let (_, d) = self.rows_cols(x);
                let mut gx = vec![0.0; self.nodes[x.0].data.len()];
                for (pos, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        gx[i * d + c] += g[pos * d + c];
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    let slice = g[offset..offset + len].to_vec();
                    self.accumulate(p, &slice);
                    offset += len;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (rows, d) = self.rows_cols(x);
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    for c in 0..len {
                        gx[r * d + start + c] = g[r * len + c];
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::ConcatCols { parts } => {
                let rows = self.rows_cols(parts[0]).0;
                let total: usize = parts.iter().map(|p| self.rows_cols(*p).1).sum();
                let mut offset = 0;
                for p in parts {
                    let c = self.rows_cols(p).1;
                    let mut gp = vec![0.0; rows * c];
                    for r in 0..rows {
                        gp[r * c..(r + 1) * c]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    self.accumulate(p, &gp);
                    offset += c;
                }
            }
            Op::BroadcastRows { v, n } => {
                let d = self.nodes[v.0].data.len();
                let mut gv = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        gv[c] += g[r * d + c];
                    }
                }
                self.accumulate(v, &gv);
            }
            Op::L2NormalizeRows { x, eps } => {
                let (rows, d) = self.rows_cols(x);
                let xd = self.nodes[x.0].data.clone();
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let norm2 = row.iter().map(|v| v * v).sum::<f64>() + eps;
                    let norm = norm2.sqrt();
                    let dot: f64 = grow.iter().zip(row).map(|(g, x)| g * x).sum();
                    for c in 0..d {
                        gx[r * d + c] = grow[c] / norm - row[c] * dot / (norm2 * norm);
                    }
                }
                self.accumulate(x, &gx);
            }
        }
        Ok(())
    }

    fn backward_bin(&mut self, kind: BinKind, a: Var, b: Var, id: usize, g: &[f64]) {
        let plan = broadcast_plan(&self.nodes[a.0].shape, &self.nodes[b.0].shape)
            .expect("checked at forward time");
        let ad = self.nodes[a.0].data.clone();
        let bd = self.nodes[b.0].data.clone();
        let _ = id;
        if self.nodes[a.0].requires_grad {
            let mut ga = vec![0.0; ad.len()];
            for (i, &gv) in g.iter().enumerate() {
                let x = ad[plan.index_a(i)];
                let y = bd[plan.index_b(i)];
                ga[plan.index_a(i)] += gv * bin_grad_a(kind, x, y);
            }
            self.accumulate(a, &ga);
        }
        if self.nodes[b.0].requires_grad {
            let mut gb = vec![0.0; bd.len()];
            for (i, &gv) in g.iter().enumerate() {
                let x = ad[plan.index_a(i)];
                let y = bd[plan.index_b(i)];
                gb[plan.index_b(i)] += gv * bin_grad_b(kind, x, y);
            }
            self.accumulate(b, &gb);
        }
    }

    fn backward_layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64, g: &[f64]) {
        let (rows, d) = self.rows_cols(x);
        let xd = self.nodes[x.0].data.clone();
        let gn = self.nodes[gain.0].data.clone();
        let mut gx = vec![0.0; rows * d];
        let mut ggain = vec![0.0; d];
        let mut gbias = vec![0.0; d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let grow = &g[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
            // dL/dxhat = g ∘ gain; then the usual two-mean correction.
            let gxhat: Vec<f64> = grow.iter().zip(&gn).map(|(g, w)| g * w).collect();
            let m1 = gxhat.iter().sum::<f64>() / d as f64;
            let m2 = gxhat.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / d as f64;
            for c in 0..d {
                gx[r * d + c] = (gxhat[c] - m1 - xhat[c] * m2) * inv;
                ggain[c] += grow[c] * xhat[c];
                gbias[c] += grow[c];
            }
        }
        self.accumulate(x, &gx);
        self.accumulate(gain, &ggain);
        self.accumulate(bias, &gbias);
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────

/// Row-major `a[m×k] · b[k×n]`, ikj loop order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn softmax_lane(lane: &mut [f64]) {
    let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in lane.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in lane.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_lane(lane: &mut [f64]) {
    let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = lane.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in lane.iter_mut() {
        *v -= lse;
    }
}

/// Apply `f` to each lane along `axis` of a row-major 1-D/2-D buffer.
fn for_each_lane_mut(data: &mut [f64], shape: &[usize], axis: usize, f: impl Fn(&mut [f64])) {
    match (shape.len(), axis) {
        (0, _) | (1, 0) => f(data),
        (2, 1) => {
            let d = shape[1];
            for lane in data.chunks_mut(d) {
                f(lane);
            }
        }
        (2, 0) => {
            let (rows, cols) = (shape[0], shape[1]);
            let mut lane = vec![0.0; rows];
            for c in 0..cols {
                for r in 0..rows {
                    lane[r] = data[r * cols + c];
                }
                f(&mut lane);
                for r in 0..rows {
                    data[r * cols + c] = lane[r];
                }
            }
        }
        _ => unreachable!("axis checked at forward time"),
    }
}

/// Like `for_each_lane_mut`, but pairs each gradient lane with the matching
/// forward-output lane.
fn for_each_lane_pair_mut(
    g: &mut [f64],
    out: &[f64],
    shape: &[usize],
    axis: usize,
    f: impl Fn(&mut [f64], &[f64]),
) {
    match (shape.len(), axis) {
        (0, _) | (1, 0) => f(g, out),
        (2, 1) => {
            let d = shape[1];
            for (glane, olane) in g.chunks_mut(d).zip(out.chunks(d)) {
                f(glane, olane);
            }
        }
        (2, 0) => {
            let (rows, cols) = (shape[0], shape[1]);
            let mut glane = vec![0.0; rows];
            let mut olane = vec![0.0; rows];
            for c in 0..cols {
                for r in 0..rows {
                    glane[r] = g[r * cols + c];
                    olane[r] = out[r * cols + c];
                }
                f(&mut glane, &olane);
                for r in 0..rows {
                    g[r * cols + c] = glane[r];
                }
            }
        }
        _ => unreachable!("axis checked at forward time"),
    }
}

fn apply_un(kind: UnKind, v: f64) -> f64 {
    match kind {
        UnKind::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        // Branch on sign so neither exp overflows.
        UnKind::Sigmoid => {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        }
        UnKind::Exp => v.exp(),
        UnKind::Log => v.ln(),
        UnKind::Neg => -v,
    }
}

fn apply_bin(kind: BinKind, x: f64, y: f64) -> f64 {
    match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
        BinKind::Min => {
            if x <= y {
                x
            } else {
                y
            }
        }
        BinKind::Max => {
            if x >= y {
                x
            } else {
                y
            }
        }
    }
}

// Ties in min/max route the gradient to the first argument.
fn bin_grad_a(kind: BinKind, x: f64, y: f64) -> f64 {
    match kind {
        BinKind::Add | BinKind::Sub => 1.0,
        BinKind::Mul => y,
        BinKind::Div => 1.0 / y,
        BinKind::Min => {
            if x <= y {
                1.0
            } else {
                0.0
            }
        }
        BinKind::Max => {
            if x >= y {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn bin_grad_b(kind: BinKind, x: f64, y: f64) -> f64 {
    match kind {
        BinKind::Add => 1.0,
        BinKind::Sub => -1.0,
        BinKind::Mul => x,
        BinKind::Div => -x / (y * y),
        BinKind::Min => {
            if x <= y {
                0.0
            } else {
                1.0
            }
        }
        BinKind::Max => {
            if x >= y {
                0.0
            } else {
                1.0
            }
        }
    }
}

// ── Broadcasting ────────────────────────────────────────────────────

/// Supported pairs: identical shapes, `[n×d]` with `[d]`, anything with a
/// scalar. `stride == 0` marks the broadcast side.
struct BroadcastPlan {
    out_shape: Vec<usize>,
    mode_a: IndexMode,
    mode_b: IndexMode,
}

#[derive(Clone, Copy)]
enum IndexMode {
    Full,
    RowVector { d: usize },
    Scalar,
}

impl BroadcastPlan {
    fn index_a(&self, i: usize) -> usize {
        index_for(self.mode_a, i)
    }
    fn index_b(&self, i: usize) -> usize {
        index_for(self.mode_b, i)
    }
}

fn index_for(mode: IndexMode, i: usize) -> usize {
    match mode {
        IndexMode::Full => i,
        IndexMode::RowVector { d } => i % d,
        IndexMode::Scalar => 0,
    }
}

fn is_scalar_shape(s: &[usize]) -> bool {
    s.iter().product::<usize>() == 1
}

fn broadcast_plan(a: &[usize], b: &[usize]) -> Option<BroadcastPlan> {
    if a == b {
        return Some(BroadcastPlan {
            out_shape: a.to_vec(),
            mode_a: IndexMode::Full,
            mode_b: IndexMode::Full,
        });
    }
    if is_scalar_shape(b) {
        return Some(BroadcastPlan {
            out_shape: a.to_vec(),
            mode_a: IndexMode::Full,
            mode_b: IndexMode::Scalar,
        });
    }
    if is_scalar_shape(a) {
        return Some(BroadcastPlan {
            out_shape: b.to_vec(),
            mode_a: IndexMode::Scalar,
            mode_b: IndexMode::Full,
        });
    }
    // [n, d] against [d]: vector broadcast over rows.
    if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        return Some(BroadcastPlan {
            out_shape: a.to_vec(),
            mode_a: IndexMode::Full,
            mode_b: IndexMode::RowVector { d: b[0] },
        });
    }
    if b.len() == 2 && a.len() == 1 && b[1] == a[0] {
        return Some(BroadcastPlan {
            out_shape: b.to_vec(),
            mode_a: IndexMode::RowVector { d: a[0] },
            mode_b: IndexMode::Full,
        });
    }
    None
}
