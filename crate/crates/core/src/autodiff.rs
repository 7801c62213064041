//! Reverse-mode differentiation over an explicitly unrolled, time-stepped graph.
//!
//! The graph is define-by-run: every forward operation appends a node holding
//! its value and the ids of its parents, so creation order is a topological
//! order. `backward` walks the nodes in reverse and accumulates vector-Jacobian
//! products. The spike nonlinearity uses a triangular pseudo-derivative.
//!
//! Ops are coarse (matrix-vector products, linear combinations, a fused
//! Hebbian update) because the networks unroll for hundreds of steps and a
//! scalar tape would be far too slow.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{arg, Error, Result};
use crate::hebbian::{self, HebbianParams};
use crate::tensor::Matrix;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a node; only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Pseudo-derivative parameters of the spike function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateParams {
    /// Dampening factor, `0 < beta <= 1`.
    pub beta: f64,
    /// Firing threshold.
    pub theta: f64,
}

impl SurrogateParams {
    pub fn new(beta: f64, theta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return arg(format!("surrogate dampening must lie in (0, 1], got {beta}"));
        }
        if !(theta > 0.0) {
            return arg(format!("threshold must be positive, got {theta}"));
        }
        Ok(Self { beta, theta })
    }
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { beta: 1.0, theta: 0.1 }
    }
}

/// Heaviside spike with strict threshold. Returns the binary spikes and the
/// normalized potential `(V - theta) / theta` needed by the backward rule.
pub fn spike_threshold(membrane: &[f64], theta: f64) -> (Vec<f64>, Vec<f64>) {
    let mut z = Vec::with_capacity(membrane.len());
    let mut v = Vec::with_capacity(membrane.len());
    for &m in membrane {
        z.push(if m > theta { 1.0 } else { 0.0 });
        v.push((m - theta) / theta);
    }
    (z, v)
}

/// Triangular pseudo-derivative of the spike w.r.t. the normalized potential,
/// multiplied into `upstream`.
pub fn spike_backward(v_norm: &[f64], upstream: &[f64], params: SurrogateParams) -> Vec<f64> {
    v_norm
        .iter()
        .zip(upstream)
        .map(|(&v, &g)| g * surrogate(v, params.beta))
        .collect()
}

#[inline]
fn surrogate(v: f64, beta: f64) -> f64 {
    beta * (1.0 - v.abs()).max(0.0)
}

/// Forward rule that produced a node.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// `w (r x c) * x (c)`.
    MatVec { w: usize, x: usize },
    /// `bias + sum_i c_i * x_i`, all terms the same shape.
    LinComb { terms: Vec<(usize, f64)>, bias: f64 },
    Mul { a: usize, b: usize },
    /// Spikes of a membrane; `blocked` neurons are refractory and cannot fire.
    Spike { membrane: usize, theta: f64, beta: f64, v_norm: Vec<f64>, blocked: Vec<bool> },
    Concat { parts: Vec<usize> },
    /// `W + dW` with the soft-bounded Hebbian rule; `kk` pre (key), `kv` post (value).
    Hebbian { w: usize, kk: usize, kv: usize, params: HebbianParams },
    Tanh { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Square { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    Min { a: usize, b: usize },
    Sum { x: usize },
    Pick { x: usize, index: usize },
    Dot { a: usize, b: usize },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    /// `-log softmax(logits)[target]`; keeps the probabilities for backward.
    SoftmaxXent { logits: usize, target: usize, probs: Vec<f64> },
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatVec { .. } => "matvec",
            Op::LinComb { .. } => "lincomb",
            Op::Mul { .. } => "mul",
            Op::Spike { .. } => "spike",
            Op::Concat { .. } => "concat",
            Op::Hebbian { .. } => "hebbian",
            Op::Tanh { .. } => "tanh",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Square { .. } => "square",
            Op::Clamp { .. } => "clamp",
            Op::Min { .. } => "min",
            Op::Sum { .. } => "sum",
            Op::Pick { .. } => "pick",
            Op::Dot { .. } => "dot",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }

    pub fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatVec { w, x } => vec![*w, *x],
            Op::LinComb { terms, .. } => terms.iter().map(|t| t.0).collect(),
            Op::Mul { a, b } | Op::Min { a, b } | Op::Dot { a, b } => vec![*a, *b],
            Op::Spike { membrane, .. } => vec![*membrane],
            Op::Concat { parts } => parts.clone(),
            Op::Hebbian { w, kk, kv, .. } => vec![*w, *kk, *kv],
            Op::Tanh { x }
            | Op::Exp { x }
            | Op::Log { x }
            | Op::Square { x }
            | Op::Clamp { x, .. }
            | Op::Sum { x }
            | Op::Pick { x, .. }
            | Op::Softmax { x }
            | Op::LogSoftmax { x } => vec![*x],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

/// A value in the unrolled computation graph.
#[derive(Clone, Debug)]
pub struct ComputeNode {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
    /// Indices whose gradient can be nonzero; `None` means all.
    support: Option<Vec<u32>>,
}

/// Define-by-run computation graph.
pub struct Graph {
    id: u64,
    nodes: Vec<ComputeNode>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&ComputeNode> {
        let i = self.check(id)?;
        Ok(&self.nodes[i])
    }

    /// Value of a node. Panics on a foreign id.
    pub fn value(&self, id: NodeId) -> &[f64] {
        let i = self.check(id).expect("node belongs to this graph");
        &self.nodes[i].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[self.check(id).expect("node belongs to this graph")];
        (n.rows, n.cols)
    }

    pub fn contains_op(&self, tag: &str) -> bool {
        self.nodes.iter().any(|n| n.op.tag() == tag)
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(Error::Structural(format!("node {} does not belong to this graph", id.index)));
        }
        Ok(id.index)
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        let index = self.nodes.len();
        self.nodes.push(ComputeNode { rows, cols, value, op, requires_grad, support: None });
        NodeId { graph: self.id, index }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, m: &Matrix, requires_grad: bool) -> NodeId {
        self.push(m.rows, m.cols, m.data.clone(), Op::Leaf, requires_grad)
    }

    /// Trainable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, m: &Matrix) -> NodeId {
        self.leaf(m, true)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(Error::Structural(format!("constant {rows}x{cols} given {} values", data.len())));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> NodeId {
        let n = data.len();
        self.push(n, 1, data, Op::Leaf, false)
    }

    pub fn param_vec(&mut self, data: Vec<f64>) -> NodeId {
        let n = data.len();
        self.push(n, 1, data, Op::Leaf, true)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf, false)
    }

    // ---- ops ----------------------------------------------------------

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (wi, xi) = (self.check(w)?, self.check(x)?);
        let (r, c) = (self.nodes[wi].rows, self.nodes[wi].cols);
        if self.nodes[xi].value.len() != c {
            return Err(Error::Structural(format!(
                "matvec: {r}x{c} matrix times vector of length {}",
                self.nodes[xi].value.len()
            )));
        }
        let mut out = vec![0.0; r];
        crate::tensor::matvec_into(&self.nodes[wi].value, r, c, &self.nodes[xi].value, &mut out);
        let rg = self.rg(wi) || self.rg(xi);
        Ok(self.push(r, 1, out, Op::MatVec { w: wi, x: xi }, rg))
    }

    /// `bias + sum c_i x_i`.
    pub fn lincomb(&mut self, terms: &[(NodeId, f64)], bias: f64) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Structural("lincomb needs at least one term".into()));
        }
        let first = self.check(terms[0].0)?;
        let (rows, cols) = (self.nodes[first].rows, self.nodes[first].cols);
        let mut out = vec![bias; rows * cols];
        let mut idx = Vec::with_capacity(terms.len());
        let mut rg = false;
        for &(id, c) in terms {
            let i = self.check(id)?;
            let n = &self.nodes[i];
            if n.value.len() != out.len() {
                return Err(Error::Structural(format!(
                    "lincomb: term of length {} against {}",
                    n.value.len(),
                    out.len()
                )));
            }
            for (o, v) in out.iter_mut().zip(&n.value) {
                *o += c * v;
            }
            rg |= n.requires_grad;
            idx.push((i, c));
        }
        Ok(self.push(rows, cols, out, Op::LinComb { terms: idx, bias }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.lincomb(&[(a, 1.0), (b, 1.0)], 0.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.lincomb(&[(a, 1.0), (b, -1.0)], 0.0)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.lincomb(&[(a, s)], 0.0)
    }

    pub fn affine(&mut self, a: NodeId, s: f64, bias: f64) -> Result<NodeId> {
        self.lincomb(&[(a, s)], bias)
    }

    fn same_len(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.nodes[a].value.len() != self.nodes[b].value.len() {
            return Err(Error::Structural(format!(
                "{what}: lengths {} and {}",
                self.nodes[a].value.len(),
                self.nodes[b].value.len()
            )));
        }
        Ok(())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_len(ai, bi, "mul")?;
        let out: Vec<f64> = self.nodes[ai].value.iter().zip(&self.nodes[bi].value).map(|(x, y)| x * y).collect();
        let (r, c) = (self.nodes[ai].rows, self.nodes[ai].cols);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(r, c, out, Op::Mul { a: ai, b: bi }, rg))
    }

    /// Spikes where `membrane > theta` and the neuron is not blocked.
    pub fn spike(&mut self, membrane: NodeId, params: SurrogateParams, blocked: Option<&[bool]>) -> Result<NodeId> {
        let mi = self.check(membrane)?;
        let len = self.nodes[mi].value.len();
        let blocked: Vec<bool> = match blocked {
            Some(b) if b.len() != len => {
                return Err(Error::Structural(format!("spike: mask of length {} for {len} neurons", b.len())))
            }
            Some(b) => b.to_vec(),
            None => vec![false; len],
        };
        let (mut z, v) = spike_threshold(&self.nodes[mi].value, params.theta);
        for (zi, &b) in z.iter_mut().zip(&blocked) {
            if b {
                *zi = 0.0;
            }
        }
        let rg = self.rg(mi);
        let support = rg.then(|| {
            (0..len)
                .filter(|&i| !blocked[i] && surrogate(v[i], params.beta) != 0.0)
                .map(|i| i as u32)
                .collect()
        });
        let (r, c) = (self.nodes[mi].rows, self.nodes[mi].cols);
        let id = self.push(
            r,
            c,
            z,
            Op::Spike { membrane: mi, theta: params.theta, beta: params.beta, v_norm: v, blocked },
            rg,
        );
        self.nodes[id.index].support = support;
        Ok(id)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut idx = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let i = self.check(p)?;
            out.extend_from_slice(&self.nodes[i].value);
            rg |= self.nodes[i].requires_grad;
            idx.push(i);
        }
        // Gradient support is the union of the parts' supports.
        let support = rg.then(|| {
            let mut s = Vec::new();
            let mut offset = 0u32;
            for &i in &idx {
                let n = &self.nodes[i];
                if n.requires_grad {
                    match &n.support {
                        Some(sup) => s.extend(sup.iter().map(|k| k + offset)),
                        None => s.extend(offset..offset + n.value.len() as u32),
                    }
                }
                offset += n.value.len() as u32;
            }
            s
        });
        let n = out.len();
        let id = self.push(n, 1, out, Op::Concat { parts: idx }, rg);
        self.nodes[id.index].support = support;
        Ok(id)
    }

    /// One Hebbian step `W(t+1) = W(t) + dW(t)` on a `post x pre` matrix.
    pub fn hebbian(&mut self, w: NodeId, kappa_key: NodeId, kappa_value: NodeId, params: HebbianParams) -> Result<NodeId> {
        let (wi, ki, vi) = (self.check(w)?, self.check(kappa_key)?, self.check(kappa_value)?);
        let (r, c) = (self.nodes[wi].rows, self.nodes[wi].cols);
        if self.nodes[ki].value.len() != c || self.nodes[vi].value.len() != r {
            return Err(Error::Structural(format!(
                "hebbian: {r}x{c} weights with key trace {} and value trace {}",
                self.nodes[ki].value.len(),
                self.nodes[vi].value.len()
            )));
        }
        let out = hebbian::apply_update(&self.nodes[wi].value, &self.nodes[ki].value, &self.nodes[vi].value, &params);
        let rg = self.rg(wi) || self.rg(ki) || self.rg(vi);
        Ok(self.push(r, c, out, Op::Hebbian { w: wi, kk: ki, kv: vi, params }, rg))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<NodeId> {
        let xi = self.check(x)?;
        let out: Vec<f64> = self.nodes[xi].value.iter().map(|&v| f(v)).collect();
        let (r, c) = (self.nodes[xi].rows, self.nodes[xi].cols);
        let rg = self.rg(xi);
        Ok(self.push(r, c, out, op(xi), rg))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::tanh, |x| Op::Tanh { x })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::exp, |x| Op::Exp { x })
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::ln, |x| Op::Log { x })
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v * v, |x| Op::Square { x })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary(x, |v| v.clamp(lo, hi), |x| Op::Clamp { x, lo, hi })
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_len(ai, bi, "min")?;
        let out: Vec<f64> = self.nodes[ai].value.iter().zip(&self.nodes[bi].value).map(|(x, y)| x.min(*y)).collect();
        let (r, c) = (self.nodes[ai].rows, self.nodes[ai].cols);
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(r, c, out, Op::Min { a: ai, b: bi }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.check(x)?;
        let s = self.nodes[xi].value.iter().sum();
        let rg = self.rg(xi);
        Ok(self.push(1, 1, vec![s], Op::Sum { x: xi }, rg))
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xi = self.check(x)?;
        let Some(&v) = self.nodes[xi].value.get(index) else {
            return Err(Error::Structural(format!("pick: index {index} out of range")));
        };
        let rg = self.rg(xi);
        Ok(self.push(1, 1, vec![v], Op::Pick { x: xi, index }, rg))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_len(ai, bi, "dot")?;
        let s = self.nodes[ai].value.iter().zip(&self.nodes[bi].value).map(|(x, y)| x * y).sum();
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(1, 1, vec![s], Op::Dot { a: ai, b: bi }, rg))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.check(x)?;
        let out = softmax(&self.nodes[xi].value);
        let (r, c) = (self.nodes[xi].rows, self.nodes[xi].cols);
        let rg = self.rg(xi);
        Ok(self.push(r, c, out, Op::Softmax { x: xi }, rg))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.check(x)?;
        let out = log_softmax(&self.nodes[xi].value);
        let (r, c) = (self.nodes[xi].rows, self.nodes[xi].cols);
        let rg = self.rg(xi);
        Ok(self.push(r, c, out, Op::LogSoftmax { x: xi }, rg))
    }

    /// Cross-entropy of `softmax(logits)` against a zero-based class index.
    pub fn softmax_xent(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let li = self.check(logits)?;
        let x = &self.nodes[li].value;
        if target >= x.len() {
            return Err(Error::Structural(format!("softmax_xent: target {target} for {} classes", x.len())));
        }
        let ls = log_softmax(x);
        let probs: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        let loss = -ls[target];
        let rg = self.rg(li);
        Ok(self.push(1, 1, vec![loss], Op::SoftmaxXent { logits: li, target, probs }, rg))
    }

    // ---- backward -----------------------------------------------------

    /// Gradients of a scalar loss w.r.t. every leaf that requires them.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let i = self.check(loss)?;
        if self.nodes[i].value.len() != 1 {
            return Err(Error::Structural(format!(
                "backward needs a scalar loss, node has {} values",
                self.nodes[i].value.len()
            )));
        }
        self.backward_from(&[(loss, vec![1.0])])
    }

    /// Reverse sweep seeded with explicit upstream gradients on several nodes.
    pub fn backward_from(&self, seeds: &[(NodeId, Vec<f64>)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut start = 0;
        for (id, seed) in seeds {
            let i = self.check(*id)?;
            accumulate(&mut grads, i, self.nodes[i].value.len(), |g| {
                if g.len() != seed.len() {
                    return Err(Error::Structural(format!("seed of length {} for node of length {}", seed.len(), g.len())));
                }
                for (a, b) in g.iter_mut().zip(seed) {
                    *a += b;
                }
                Ok(())
            })?;
            start = start.max(i + 1);
        }
        let mut leaf_grads: Vec<Option<Vec<f64>>> = vec![None; n];
        for i in (0..start).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(g);
                continue;
            }
            for p in node.op.parents() {
                if p >= i {
                    return Err(Error::Structural(format!("cycle: node {i} depends on later node {p}")));
                }
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { graph: self.id, grads: leaf_grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatVec { w, x } => {
                let (r, c) = (nodes[*w].rows, nodes[*w].cols);
                let xv = &nodes[*x].value;
                if nodes[*w].requires_grad {
                    let active: Vec<usize> = (0..c).filter(|&j| xv[j] != 0.0).collect();
                    if !active.is_empty() {
                        accumulate(grads, *w, r * c, |dw| {
                            for (row, &gi) in g.iter().enumerate() {
                                if gi == 0.0 {
                                    continue;
                                }
                                let drow = &mut dw[row * c..(row + 1) * c];
                                for &j in &active {
                                    drow[j] += gi * xv[j];
                                }
                            }
                            Ok(())
                        })?;
                    }
                }
                if nodes[*x].requires_grad {
                    let wv = &nodes[*w].value;
                    let support = nodes[*x].support.as_deref();
                    if support.is_some_and(|s| s.is_empty()) {
                        return Ok(());
                    }
                    accumulate(grads, *x, c, |dx| {
                        for (row, &gi) in g.iter().enumerate() {
                            if gi == 0.0 {
                                continue;
                            }
                            let wrow = &wv[row * c..(row + 1) * c];
                            match support {
                                Some(s) => {
                                    for &j in s {
                                        dx[j as usize] += wrow[j as usize] * gi;
                                    }
                                }
                                None => {
                                    for (d, wj) in dx.iter_mut().zip(wrow) {
                                        *d += wj * gi;
                                    }
                                }
                            }
                        }
                        Ok(())
                    })?;
                }
            }
            Op::LinComb { terms, .. } => {
                for &(p, c) in terms {
                    if nodes[p].requires_grad && c != 0.0 {
                        accumulate(grads, p, g.len(), |d| {
                            for (a, b) in d.iter_mut().zip(g) {
                                *a += c * b;
                            }
                            Ok(())
                        })?;
                    }
                }
            }
            Op::Mul { a, b } => {
                for (p, other) in [(*a, *b), (*b, *a)] {
                    if nodes[p].requires_grad {
                        let ov = &nodes[other].value;
                        accumulate(grads, p, g.len(), |d| {
                            for k in 0..d.len() {
                                d[k] += g[k] * ov[k];
                            }
                            Ok(())
                        })?;
                    }
                }
            }
            Op::Spike { membrane, theta, beta, v_norm, blocked } => {
                let inv = 1.0 / theta;
                accumulate(grads, *membrane, g.len(), |d| {
                    for k in 0..d.len() {
                        if !blocked[k] {
                            d[k] += g[k] * surrogate(v_norm[k], *beta) * inv;
                        }
                    }
                    Ok(())
                })?;
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if nodes[p].requires_grad {
                        let slice = &g[offset..offset + len];
                        accumulate(grads, p, len, |d| {
                            for (a, b) in d.iter_mut().zip(slice) {
                                *a += b;
                            }
                            Ok(())
                        })?;
                    }
                    offset += len;
                }
            }
            Op::Hebbian { w, kk, kv, params } => {
                let (r, c) = (nodes[*w].rows, nodes[*w].cols);
                let wv = &nodes[*w].value;
                let kkv = &nodes[*kk].value;
                let kvv = &nodes[*kv].value;
                let (gp, gm, wmax) = (params.gamma_plus, params.gamma_minus, params.w_max);
                let (need_w, need_kk, need_kv) = (nodes[*w].requires_grad, nodes[*kk].requires_grad, nodes[*kv].requires_grad);
                // one fused sweep over the matrix
                let decay: Vec<f64> = kkv.iter().map(|&x| gm * x * x).collect();
                let two_gm_kk: Vec<f64> = kkv.iter().map(|&x| 2.0 * gm * x).collect();
                let mut dw = if need_w { grads[*w].take().unwrap_or_else(|| vec![0.0; r * c]) } else { Vec::new() };
                if dw.len() != if need_w { r * c } else { 0 } {
                    return Err(Error::Structural("hebbian: gradient shape mismatch".into()));
                }
                let mut dkk = vec![0.0; if need_kk { c } else { 0 }];
                let mut dkv = vec![0.0; if need_kv { r } else { 0 }];
                for k in 0..r {
                    let a = gp * kvv[k];
                    let grow = &g[k * c..(k + 1) * c];
                    let wrow = &wv[k * c..(k + 1) * c];
                    if need_w {
                        let drow = &mut dw[k * c..(k + 1) * c];
                        for (((d, &gj), &kj), &q) in drow.iter_mut().zip(grow).zip(kkv).zip(&decay) {
                            *d += gj * (1.0 - a * kj - q);
                        }
                    }
                    if need_kv {
                        let mut lanes = [0.0f64; 4];
                        let mut gc = grow.chunks_exact(4);
                        let mut wc = wrow.chunks_exact(4);
                        let mut kc = kkv.chunks_exact(4);
                        for ((g4, w4), k4) in (&mut gc).zip(&mut wc).zip(&mut kc) {
                            for l in 0..4 {
                                lanes[l] += g4[l] * (wmax - w4[l]) * k4[l];
                            }
                        }
                        let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
                        for ((&gj, &wj), &kj) in gc.remainder().iter().zip(wc.remainder()).zip(kc.remainder()) {
                            s += gj * (wmax - wj) * kj;
                        }
                        dkv[k] = gp * s;
                    }
                    if need_kk {
                        for (((d, &gj), &wj), &t) in dkk.iter_mut().zip(grow).zip(wrow).zip(&two_gm_kk) {
                            *d += gj * (a * (wmax - wj) - t * wj);
                        }
                    }
                }
                if need_w {
                    grads[*w] = Some(dw);
                }
                for (p, d) in [(*kk, dkk), (*kv, dkv)] {
                    if !d.is_empty() {
                        accumulate(grads, p, d.len(), |acc| {
                            acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                            Ok(())
                        })?;
                    }
                }
            }
            Op::Tanh { x } => {
                let y = &node.value;
                accumulate(grads, *x, g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                    Ok(())
                })?;
            }
            Op::Exp { x } => {
                let y = &node.value;
                accumulate(grads, *x, g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k];
                    }
                    Ok(())
                })?;
            }
            Op::Log { x } => {
                let xv = &nodes[*x].value;
                accumulate(grads, *x, g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / xv[k];
                    }
                    Ok(())
                })?;
            }
            Op::Square { x } => {
                let xv = &nodes[*x].value;
                accumulate(grads, *x, g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += 2.0 * xv[k] * g[k];
                    }
                    Ok(())
                })?;
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &nodes[*x].value;
                accumulate(grads, *x, g.len(), |d| {
                    for k in 0..d.len() {
                        if xv[k] > *lo && xv[k] < *hi {
                            d[k] += g[k];
                        }
                    }
                    Ok(())
                })?;
            }
            Op::Min { a, b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                // Ties route to `a`.
                if nodes[*a].requires_grad {
                    accumulate(grads, *a, g.len(), |d| {
                        for k in 0..d.len() {
                            if av[k] <= bv[k] {
                                d[k] += g[k];
                            }
                        }
                        Ok(())
                    })?;
                }
                if nodes[*b].requires_grad {
                    accumulate(grads, *b, g.len(), |d| {
                        for k in 0..d.len() {
                            if av[k] > bv[k] {
                                d[k] += g[k];
                            }
                        }
                        Ok(())
                    })?;
                }
            }
            Op::Sum { x } => {
                let len = nodes[*x].value.len();
                accumulate(grads, *x, len, |d| {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                    Ok(())
                })?;
            }
            Op::Pick { x, index } => {
                let len = nodes[*x].value.len();
                accumulate(grads, *x, len, |d| {
                    d[*index] += g[0];
                    Ok(())
                })?;
            }
            Op::Dot { a, b } => {
                for (p, other) in [(*a, *b), (*b, *a)] {
                    if nodes[p].requires_grad {
                        let ov = &nodes[other].value;
                        accumulate(grads, p, ov.len(), |d| {
                            for k in 0..d.len() {
                                d[k] += g[0] * ov[k];
                            }
                            Ok(())
                        })?;
                    }
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let s: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                accumulate(grads, *x, g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += y[k] * (g[k] - s);
                    }
                    Ok(())
                })?;
            }
            Op::LogSoftmax { x } => {
                let y = &node.value;
                let s: f64 = g.iter().sum();
                accumulate(grads, *x, g.len(), |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] - y[k].exp() * s;
                    }
                    Ok(())
                })?;
            }
            Op::SoftmaxXent { logits, target, probs } => {
                accumulate(grads, *logits, probs.len(), |d| {
                    for k in 0..d.len() {
                        let t = if k == *target { 1.0 } else { 0.0 };
                        d[k] += g[0] * (probs[k] - t);
                    }
                    Ok(())
                })?;
            }
        }
        Ok(())
    }
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    i: usize,
    len: usize,
    f: impl FnOnce(&mut [f64]) -> Result<()>,
) -> Result<()> {
    let slot = grads[i].get_or_insert_with(|| vec![0.0; len]);
    if slot.len() != len {
        return Err(Error::Structural(format!("gradient of length {} accumulated into {len}", slot.len())));
    }
    f(slot)
}

/// Leaf gradients produced by one reverse sweep.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        if id.graph != self.graph {
            return None;
        }
        self.grads.get(id.index).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, zero-filled when unreached.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Largest relative error `|analytic - numeric| / max(1, |analytic|)` between
/// `backward` and central differences of a smooth graph.
///
/// `build` receives a fresh graph and the parameter leaf and returns the scalar loss.
pub fn grad_check<F>(build: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return arg(format!("finite-difference step must be positive, got {eps}"));
    }
    let eval = |p: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param_vec(p.to_vec());
        let loss = build(&mut g, x)?;
        Ok(g.scalar(loss))
    };
    let mut g = Graph::new();
    let x = g.param_vec(params.to_vec());
    let loss = build(&mut g, x)?;
    if g.contains_op("spike") {
        return arg("grad_check: graph contains spike nodes; finite differences are invalid across the threshold");
    }
    let analytic = g.backward(loss)?.get_or_zeros(x, params.len());
    let mut worst = 0.0f64;
    let mut p = params.to_vec();
    for k in 0..params.len() {
        let orig = p[k];
        p[k] = orig + eps;
        let up = eval(&p)?;
        p[k] = orig - eps;
        let down = eval(&p)?;
        p[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[k] - numeric).abs() / analytic[k].abs().max(1.0));
    }
    Ok(worst)
}

/// Operation kinds covered by [`smooth_op_report`], in report order.
pub const SMOOTH_OPS: [&str; 17] = [
    "matvec", "lincomb", "mul", "concat", "hebbian", "tanh", "exp", "log", "square", "clamp", "min", "sum", "pick", "dot",
    "softmax", "log_softmax", "softmax_xent",
];

/// [`grad_check`] of every differentiable operation kind on its own, each
/// reduced to a scalar by a sum of squares. Inputs are drawn from `(0.2, 1)`.
pub fn smooth_op_report(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let x0: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.0)).collect();
    let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let hw: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
    let c: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let reduce = |g: &mut Graph, y: NodeId| -> Result<NodeId> {
        let sq = g.square(y)?;
        g.sum(sq)
    };
    let mut out = Vec::with_capacity(SMOOTH_OPS.len());
    for op in SMOOTH_OPS {
        let worst = grad_check(
            |g, x| {
                let y = match op {
                    "matvec" => {
                        let wn = g.constant(3, 4, w.clone())?;
                        g.matvec(wn, x)?
                    }
                    "lincomb" => {
                        let t = g.tanh(x)?;
                        g.lincomb(&[(x, 0.7), (t, -1.3)], 0.25)?
                    }
                    "mul" => {
                        let k = g.constant_vec(c.clone());
                        let xk = g.mul(x, k)?;
                        g.mul(xk, x)?
                    }
                    "concat" => {
                        let t = g.exp(x)?;
                        g.concat(&[x, t])?
                    }
                    "hebbian" => {
                        let wn = g.constant(2, 4, hw.clone())?;
                        let kv = g.pick(x, 0)?;
                        let kv2 = g.pick(x, 3)?;
                        let kv = g.concat(&[kv, kv2])?;
                        g.hebbian(wn, x, kv, HebbianParams::default())?
                    }
                    "tanh" => g.tanh(x)?,
                    "exp" => g.exp(x)?,
                    "log" => g.ln(x)?,
                    "square" => g.square(x)?,
                    "clamp" => g.clamp(x, 0.0, 0.6)?,
                    "min" => {
                        let k = g.constant_vec(vec![0.6; 4]);
                        g.min(x, k)?
                    }
                    "sum" => g.sum(x)?,
                    "pick" => g.pick(x, 2)?,
                    "dot" => {
                        let t = g.tanh(x)?;
                        g.dot(x, t)?
                    }
                    "softmax" => g.softmax(x)?,
                    "log_softmax" => g.log_softmax(x)?,
                    _ => return g.softmax_xent(x, 1),
                };
                reduce(g, y)
            },
            &x0,
            eps,
        )?;
        out.push((op, worst));
    }
    Ok(out)
}
