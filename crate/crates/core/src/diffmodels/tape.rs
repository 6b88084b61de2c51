//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every training objective in the crate (MSE, pinball, the smoothed-KS
//! composite, the orthogonal-regression composite, the mixture NLL) is built
//! as a graph of the primitives below and differentiated exactly by one
//! reverse sweep. Values are evaluated eagerly at node creation, so code that
//! builds a graph can branch on intermediate values (t-grids, variance
//! guards, argmax bookkeeping) while the tape records what the backward pass
//! needs.
//!
//! Nodes hold vectors (a scalar is a length-1 vector); all values live in one
//! arena. Nonsmooth nodes use fixed subgradient conventions: `max` routes the
//! gradient through the first attaining element, `abs` uses subgradient 0 at
//! the kink. Summations run in index order, so gradients are reproducible
//! bit-for-bit on a given platform.

use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param { offset: usize },
    /// out[r,o] = b[o] + sum_k w[o,k] * x[r,k], all matrices row-major.
    Dense { w: NodeId, b: NodeId, x: NodeId, in_dim: usize, out_dim: usize },
    /// out[r] = x[r*ncols + col]
    TakeColumn { x: NodeId, col: usize, ncols: usize },
    /// out = x[i*ncols .. (i+1)*ncols]
    Row { x: NodeId, i: usize, ncols: usize },
    LeakyRelu { x: NodeId, slope: f64 },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Sqrt { x: NodeId },
    Abs { x: NodeId },
    Square { x: NodeId },
    /// out = mul * x + add, elementwise; only the slope matters in reverse.
    Scale { x: NodeId, mul: f64 },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    /// out[i] = x[i] - s, with s a scalar node (broadcast).
    SubScalar { x: NodeId, s: NodeId },
    MinPair { a: NodeId, b: NodeId },
    MaxPair { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// Scalar max over entries; `arg` is the lowest attaining index.
    Max { x: NodeId, arg: usize },
    LogSumExp { x: NodeId },
    /// Concatenation of `aux[astart..astart+alen]` in order.
    Concat { astart: usize, alen: usize },
    /// out = [x[i]]
    Index { x: NodeId, i: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param { .. } => "param",
            Op::Dense { .. } => "dense",
            Op::TakeColumn { .. } => "take_column",
            Op::Row { .. } => "row",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softplus { .. } => "softplus",
            Op::Exp { .. } => "exp",
            Op::Ln { .. } => "ln",
            Op::Sqrt { .. } => "sqrt",
            Op::Abs { .. } => "abs",
            Op::Square { .. } => "square",
            Op::Scale { .. } => "scale",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::SubScalar { .. } => "sub_scalar",
            Op::MinPair { .. } => "min_pair",
            Op::MaxPair { .. } => "max_pair",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::LogSumExp { .. } => "log_sum_exp",
            Op::Concat { .. } => "concat",
            Op::Index { .. } => "index",
        }
    }
}

/// Tape of eagerly evaluated nodes over a parameter snapshot.
pub struct Graph {
    theta: Vec<f64>,
    ops: Vec<Op>,
    starts: Vec<usize>,
    lens: Vec<usize>,
    vals: Vec<f64>,
    aux: Vec<NodeId>,
    poisoned: Option<(usize, &'static str)>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Graph {
    /// Start a tape over a snapshot of the parameter vector.
    pub fn new(theta: &[f64]) -> Self {
        Graph {
            theta: theta.to_vec(),
            ops: Vec::new(),
            starts: Vec::new(),
            lens: Vec::new(),
            vals: Vec::new(),
            aux: Vec::new(),
            poisoned: None,
        }
    }

    /// Clear the tape but keep allocations, rebinding to a new snapshot.
    pub fn reset(&mut self, theta: &[f64]) {
        self.theta.clear();
        self.theta.extend_from_slice(theta);
        self.ops.clear();
        self.starts.clear();
        self.lens.clear();
        self.vals.clear();
        self.aux.clear();
        self.poisoned = None;
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Value of a node.
    #[inline]
    pub fn value(&self, id: NodeId) -> &[f64] {
        let i = id.idx();
        &self.vals[self.starts[i]..self.starts[i] + self.lens[i]]
    }

    /// Value of a scalar (length-1) node.
    #[inline]
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.lens[id.idx()], 1);
        self.vals[self.starts[id.idx()]]
    }

    fn push(&mut self, op: Op, len: usize) -> (NodeId, usize) {
        let id = NodeId(self.ops.len() as u32);
        let start = self.vals.len();
        self.ops.push(op);
        self.starts.push(start);
        self.lens.push(len);
        self.vals.resize(start + len, 0.0);
        (id, start)
    }

    fn check_finite(&mut self, id: NodeId) -> NodeId {
        if self.poisoned.is_none() {
            let v = self.value(id);
            if v.iter().any(|x| !x.is_finite()) {
                self.poisoned = Some((id.idx(), self.ops[id.idx()].name()));
            }
        }
        id
    }

    /// Leaf holding a copy of `vals`.
    pub fn constant(&mut self, vals: &[f64]) -> NodeId {
        let (id, start) = self.push(Op::Const, vals.len());
        self.vals[start..start + vals.len()].copy_from_slice(vals);
        self.check_finite(id)
    }

    /// Length-1 constant leaf.
    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(&[v])
    }

    /// Leaf referencing `theta[offset..offset+len]`; gradients accumulate here.
    pub fn param(&mut self, offset: usize, len: usize) -> NodeId {
        assert!(offset + len <= self.theta.len(), "param slice out of range");
        let (id, start) = self.push(Op::Param { offset }, len);
        for k in 0..len {
            self.vals[start + k] = self.theta[offset + k];
        }
        self.check_finite(id)
    }

    /// Batched affine map: `x` is `[n, in_dim]` row-major, output `[n, out_dim]`.
    pub fn dense(&mut self, w: NodeId, b: NodeId, x: NodeId, in_dim: usize, out_dim: usize) -> NodeId {
        assert_eq!(self.lens[w.idx()], in_dim * out_dim);
        assert_eq!(self.lens[b.idx()], out_dim);
        assert_eq!(self.lens[x.idx()] % in_dim, 0, "dense input not a multiple of in_dim");
        let n = self.lens[x.idx()] / in_dim;
        let (id, start) = self.push(Op::Dense { w, b, x, in_dim, out_dim }, n * out_dim);
        let ws = self.starts[w.idx()];
        let bs = self.starts[b.idx()];
        let xs = self.starts[x.idx()];
        for r in 0..n {
            for o in 0..out_dim {
                let mut acc = self.vals[bs + o];
                let wrow = ws + o * in_dim;
                let xrow = xs + r * in_dim;
                for k in 0..in_dim {
                    acc += self.vals[wrow + k] * self.vals[xrow + k];
                }
                self.vals[start + r * out_dim + o] = acc;
            }
        }
        self.check_finite(id)
    }

    /// Extract column `col` from a `[n, ncols]` node.
    pub fn take_column(&mut self, x: NodeId, col: usize, ncols: usize) -> NodeId {
        assert!(col < ncols);
        assert_eq!(self.lens[x.idx()] % ncols, 0);
        let n = self.lens[x.idx()] / ncols;
        let (id, start) = self.push(Op::TakeColumn { x, col, ncols }, n);
        let xs = self.starts[x.idx()];
        for r in 0..n {
            self.vals[start + r] = self.vals[xs + r * ncols + col];
        }
        self.check_finite(id)
    }

    /// Extract row `i` from a `[n, ncols]` node.
    pub fn row(&mut self, x: NodeId, i: usize, ncols: usize) -> NodeId {
        assert_eq!(self.lens[x.idx()] % ncols, 0);
        assert!(i < self.lens[x.idx()] / ncols);
        let (id, start) = self.push(Op::Row { x, i, ncols }, ncols);
        let xs = self.starts[x.idx()] + i * ncols;
        for k in 0..ncols {
            self.vals[start + k] = self.vals[xs + k];
        }
        self.check_finite(id)
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let len = self.lens[x.idx()];
        let (id, start) = self.push(op, len);
        let xs = self.starts[x.idx()];
        for k in 0..len {
            self.vals[start + k] = f(self.vals[xs + k]);
        }
        self.check_finite(id)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.unary(Op::LeakyRelu { x, slope }, x, |v| if v >= 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid { x }, x, sigmoid)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Softplus { x }, x, softplus)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp { x }, x, f64::exp)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Ln { x }, x, f64::ln)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sqrt { x }, x, f64::sqrt)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Abs { x }, x, f64::abs)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Square { x }, x, |v| v * v)
    }

    /// `mul * x + add` elementwise, with constant coefficients.
    pub fn scale(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        self.unary(Op::Scale { x, mul }, x, |v| mul * v + add)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let len = self.lens[a.idx()];
        assert_eq!(len, self.lens[b.idx()], "binary op length mismatch");
        let (id, start) = self.push(op, len);
        let sa = self.starts[a.idx()];
        let sb = self.starts[b.idx()];
        for k in 0..len {
            self.vals[start + k] = f(self.vals[sa + k], self.vals[sb + k]);
        }
        self.check_finite(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add { a, b }, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub { a, b }, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul { a, b }, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Div { a, b }, a, b, |x, y| x / y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::MinPair { a, b }, a, b, |x, y| if x <= y { x } else { y })
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::MaxPair { a, b }, a, b, |x, y| if x >= y { x } else { y })
    }

    /// Broadcast subtraction of a scalar node from a vector node.
    pub fn sub_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.lens[s.idx()], 1, "sub_scalar needs a scalar node");
        let sv = self.scalar(s);
        self.unary(Op::SubScalar { x, s }, x, |v| v - sv)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).iter().sum();
        let (id, start) = self.push(Op::Sum { x }, 1);
        self.vals[start] = total;
        self.check_finite(id)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        assert!(!v.is_empty(), "mean of empty node");
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let (id, start) = self.push(Op::Mean { x }, 1);
        self.vals[start] = m;
        self.check_finite(id)
    }

    /// Maximum over entries; the gradient flows to the lowest attaining index.
    pub fn max(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        assert!(!v.is_empty(), "max of empty node");
        let mut arg = 0;
        let mut best = v[0];
        for (k, &e) in v.iter().enumerate().skip(1) {
            if e > best {
                best = e;
                arg = k;
            }
        }
        let (id, start) = self.push(Op::Max { x, arg }, 1);
        self.vals[start] = best;
        self.check_finite(id)
    }

    /// Index of the entry the last `max` would pick (lowest attaining index).
    pub fn argmax_value(&self, x: NodeId) -> usize {
        let v = self.value(x);
        let mut arg = 0;
        let mut best = v[0];
        for (k, &e) in v.iter().enumerate().skip(1) {
            if e > best {
                best = e;
                arg = k;
            }
        }
        arg
    }

    /// Numerically stable log(sum(exp(x))).
    pub fn log_sum_exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        assert!(!v.is_empty());
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = v.iter().map(|&e| (e - m).exp()).sum();
        let out = m + s.ln();
        let (id, start) = self.push(Op::LogSumExp { x }, 1);
        self.vals[start] = out;
        self.check_finite(id)
    }

    /// Concatenate nodes in order into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let astart = self.aux.len();
        self.aux.extend_from_slice(parts);
        let total: usize = parts.iter().map(|p| self.lens[p.idx()]).sum();
        let (id, start) = self.push(Op::Concat { astart, alen: parts.len() }, total);
        let mut pos = start;
        for k in 0..parts.len() {
            let p = self.aux[astart + k];
            let ps = self.starts[p.idx()];
            let pl = self.lens[p.idx()];
            for j in 0..pl {
                self.vals[pos + j] = self.vals[ps + j];
            }
            pos += pl;
        }
        self.check_finite(id)
    }

    /// Pick one entry as a scalar node.
    pub fn index(&mut self, x: NodeId, i: usize) -> NodeId {
        assert!(i < self.lens[x.idx()]);
        let v = self.vals[self.starts[x.idx()] + i];
        let (id, start) = self.push(Op::Index { x, i }, 1);
        self.vals[start] = v;
        self.check_finite(id)
    }

    /// Reverse sweep from a scalar root; returns d root / d theta.
    ///
    /// Fails if any node produced a non-finite value, naming the first
    /// offending node.
    pub fn backward(&self, root: NodeId) -> Result<Vec<f64>> {
        if let Some((node, op)) = self.poisoned {
            return Err(Error::NonFinite { node, op });
        }
        assert_eq!(self.lens[root.idx()], 1, "backward root must be scalar");
        let mut adj = vec![0.0; self.vals.len()];
        let mut grad = vec![0.0; self.theta.len()];
        adj[self.starts[root.idx()]] = 1.0;

        for i in (0..=root.idx()).rev() {
            let start = self.starts[i];
            let len = self.lens[i];
            // Cheap skip: most adjoints on big tapes stay zero past the root.
            match &self.ops[i] {
                Op::Const => {}
                Op::Param { offset } => {
                    for k in 0..len {
                        grad[offset + k] += adj[start + k];
                    }
                }
                Op::Dense { w, b, x, in_dim, out_dim } => {
                    let n = len / out_dim;
                    let ws = self.starts[w.idx()];
                    let bs = self.starts[b.idx()];
                    let xs = self.starts[x.idx()];
                    for r in 0..n {
                        for o in 0..*out_dim {
                            let g = adj[start + r * out_dim + o];
                            if g == 0.0 {
                                continue;
                            }
                            adj[bs + o] += g;
                            let wrow = ws + o * in_dim;
                            let xrow = xs + r * in_dim;
                            for k in 0..*in_dim {
                                adj[wrow + k] += g * self.vals[xrow + k];
                                adj[xrow + k] += g * self.vals[wrow + k];
                            }
                        }
                    }
                }
                Op::TakeColumn { x, col, ncols } => {
                    let xs = self.starts[x.idx()];
                    for r in 0..len {
                        adj[xs + r * ncols + col] += adj[start + r];
                    }
                }
                Op::Row { x, i: ri, ncols } => {
                    let xs = self.starts[x.idx()] + ri * ncols;
                    for k in 0..len {
                        adj[xs + k] += adj[start + k];
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xs = self.starts[x.idx()];
                    for k in 0..len {
                        let d = if self.vals[xs + k] >= 0.0 { 1.0 } else { *slope };
                        adj[xs + k] += d * adj[start + k];
                    }
                }
                Op::Sigmoid { x } => {
                    let xs = self.starts[x.idx()];
                    for k in 0..len {
                        let s = self.vals[start + k];
                        adj[xs + k] += s * (1.0 - s) * adj[start + k];
                    }
                }
                Op::Softplus { x } => {
                    let xs = self.starts[x.idx()];
                    for k in 0..len {
                        adj[xs + k] += sigmoid(self.vals[xs + k]) * adj[start + k];
                    }
                }
                Op::Exp { x } => {
                    let xs = self.starts[x.idx()];
                    for k in 0..len {
                        adj[xs + k] += self.vals[start + k] * adj[start + k];
                    }
                }
                Op::Ln { x } => {
                    let xs = self.starts[x.idx()];
                    for k in 0..len {
                        adj[xs + k] += adj[start + k] / self.vals[xs + k];
                    }
                }
                Op::Sqrt { x } => {
                    let xs = self.starts[x.idx()];
                    for k in 0..len {
                        adj[xs + k] += 0.5 / self.vals[start + k] * adj[start + k];
                    }
                }
                Op::Abs { x } => {
                    let xs = self.starts[x.idx()];
                    for k in 0..len {
                        let v = self.vals[xs + k];
                        // Subgradient 0 at the kink.
                        let d = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        adj[xs + k] += d * adj[start + k];
                    }
                }
                Op::Square { x } => {
                    let xs = self.starts[x.idx()];
                    for k in 0..len {
                        adj[xs + k] += 2.0 * self.vals[xs + k] * adj[start + k];
                    }
                }
                Op::Scale { x, mul } => {
                    let xs = self.starts[x.idx()];
                    for k in 0..len {
                        adj[xs + k] += mul * adj[start + k];
                    }
                }
                Op::Add { a, b } => {
                    let sa = self.starts[a.idx()];
                    let sb = self.starts[b.idx()];
                    for k in 0..len {
                        adj[sa + k] += adj[start + k];
                        adj[sb + k] += adj[start + k];
                    }
                }
                Op::Sub { a, b } => {
                    let sa = self.starts[a.idx()];
                    let sb = self.starts[b.idx()];
                    for k in 0..len {
                        adj[sa + k] += adj[start + k];
                        adj[sb + k] -= adj[start + k];
                    }
                }
                Op::Mul { a, b } => {
                    let sa = self.starts[a.idx()];
                    let sb = self.starts[b.idx()];
                    for k in 0..len {
                        adj[sa + k] += self.vals[sb + k] * adj[start + k];
                        adj[sb + k] += self.vals[sa + k] * adj[start + k];
                    }
                }
                Op::Div { a, b } => {
                    let sa = self.starts[a.idx()];
                    let sb = self.starts[b.idx()];
                    for k in 0..len {
                        let bv = self.vals[sb + k];
                        let g = adj[start + k];
                        adj[sa + k] += g / bv;
                        adj[sb + k] -= g * self.vals[sa + k] / (bv * bv);
                    }
                }
                Op::SubScalar { x, s } => {
                    let xs = self.starts[x.idx()];
                    let ss = self.starts[s.idx()];
                    for k in 0..len {
                        adj[xs + k] += adj[start + k];
                        adj[ss] -= adj[start + k];
                    }
                }
                Op::MinPair { a, b } => {
                    let sa = self.starts[a.idx()];
                    let sb = self.starts[b.idx()];
                    for k in 0..len {
                        if self.vals[sa + k] <= self.vals[sb + k] {
                            adj[sa + k] += adj[start + k];
                        } else {
                            adj[sb + k] += adj[start + k];
                        }
                    }
                }
                Op::MaxPair { a, b } => {
                    let sa = self.starts[a.idx()];
                    let sb = self.starts[b.idx()];
                    for k in 0..len {
                        if self.vals[sa + k] >= self.vals[sb + k] {
                            adj[sa + k] += adj[start + k];
                        } else {
                            adj[sb + k] += adj[start + k];
                        }
                    }
                }
                Op::Sum { x } => {
                    let xs = self.starts[x.idx()];
                    let g = adj[start];
                    if g != 0.0 {
                        for k in 0..self.lens[x.idx()] {
                            adj[xs + k] += g;
                        }
                    }
                }
                Op::Mean { x } => {
                    let xl = self.lens[x.idx()];
                    let xs = self.starts[x.idx()];
                    let g = adj[start] / xl as f64;
                    if g != 0.0 {
                        for k in 0..xl {
                            adj[xs + k] += g;
                        }
                    }
                }
                Op::Max { x, arg } => {
                    adj[self.starts[x.idx()] + arg] += adj[start];
                }
                Op::LogSumExp { x } => {
                    let xs = self.starts[x.idx()];
                    let out = self.vals[start];
                    let g = adj[start];
                    if g != 0.0 {
                        for k in 0..self.lens[x.idx()] {
                            adj[xs + k] += g * (self.vals[xs + k] - out).exp();
                        }
                    }
                }
                Op::Concat { astart, alen } => {
                    let mut pos = start;
                    for k in 0..*alen {
                        let p = self.aux[astart + k];
                        let ps = self.starts[p.idx()];
                        let pl = self.lens[p.idx()];
                        for j in 0..pl {
                            adj[ps + j] += adj[pos + j];
                        }
                        pos += pl;
                    }
                }
                Op::Index { x, i: xi } => {
                    adj[self.starts[x.idx()] + xi] += adj[start];
                }
            }
        }
        Ok(grad)
    }
}
