//! Reverse-mode differentiation over an append-only computation record.
//!
//! Nodes are appended in execution order, so the append order is already a
//! topological order; [`Tape::backward`] walks it in exact reverse. Values are
//! computed eagerly with the kernels in [`crate::tensor`].

use crate::error::{contract, Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pointwise function kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Neg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatVec { m: Var, v: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Neg(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice { a: Var, lo: usize },
    Sum(Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy { s: Var, v: Var },
    Index(Var, usize),
    ClampMin(Var, f64),
    GatherRow { table: Var, row: usize },
    Dot(Var, Var),
    CrossEntropy { logits: Var, target: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that influenced it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// The computation record. Single-threaded; build one per thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mt, vt) = (self.value(m), self.value(v));
        if mt.shape().len() != 2 || vt.shape().len() != 1 || mt.shape()[1] != vt.shape()[0] {
            return Err(dim_err("matvec", mt, vt));
        }
        let (rows, cols) = (mt.shape()[0], mt.shape()[1]);
        let mut out = vec![0.0; rows];
        tensor::matvec_into(mt.data(), rows, cols, vt.data(), &mut out);
        let ng = self.needs(m) || self.needs(v);
        Ok(self.push(Tensor::vector(out), Op::MatVec { m, v, rows, cols }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(dim_err(name, at, bt));
        }
        Ok(at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    fn unary_out(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let at = self.value(a);
        Tensor::new(at.shape().to_vec(), at.data().iter().map(|&x| f(x)).collect())
            .expect("unary op preserves shape")
    }

    fn shaped_like(&self, a: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(a).shape().to_vec(), data).expect("binary op preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        let t = self.shaped_like(a, out);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        let t = self.shaped_like(a, out);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        let t = self.shaped_like(a, out);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary_out(a, tensor::sigmoid);
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary_out(a, f64::tanh);
        let ng = self.needs(a);
        self.push(t, Op::Tanh(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let t = self.unary_out(a, f64::ln);
        let ng = self.needs(a);
        Ok(self.push(t, Op::Log(a), ng))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary_out(a, f64::exp);
        let ng = self.needs(a);
        self.push(t, Op::Exp(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.unary_out(a, |x| -x);
        let ng = self.needs(a);
        self.push(t, Op::Neg(a), ng)
    }

    /// Dispatch over [`ElementwiseKind`]; binary kinds require `b`.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        use ElementwiseKind::*;
        let need_b = || b.ok_or_else(|| contract(format!("{kind:?} needs a second operand")));
        match kind {
            Add => self.add(a, need_b()?),
            Sub => self.sub(a, need_b()?),
            Mul => self.mul(a, need_b()?),
            Sigmoid => Ok(self.sigmoid(a)),
            Tanh => Ok(self.tanh(a)),
            Log => self.log(a),
            Exp => Ok(self.exp(a)),
            Neg => Ok(self.neg(a)),
        }
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let out = tensor::softmax(self.data(z))?;
        let ng = self.needs(z);
        Ok(self.push(Tensor::vector(out), Op::Softmax(z), ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() > 1 {
                return Err(dim_err("concat", t, t));
            }
            out.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), ng))
    }

    pub fn concat2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat(&[a, b])
    }

    pub fn slice(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let n = self.value(a).len();
        if lo > hi || hi > n {
            return Err(Error::Index {
                op: "slice",
                detail: format!("[{lo}, {hi}) of length {n}"),
            });
        }
        let out = self.data(a)[lo..hi].to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::vector(out), Op::Slice { a, lo }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Multiply by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.unary_out(a, |x| x * c);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Add a fixed, gradient-free offset.
    pub fn add_const(&mut self, a: Var, offset: &[f64]) -> Result<Var> {
        let at = self.value(a);
        if at.len() != offset.len() {
            return Err(Error::Dimension {
                op: "add_const",
                lhs: at.shape().to_vec(),
                rhs: vec![offset.len()],
            });
        }
        let out = at.data().iter().zip(offset).map(|(x, y)| x + y).collect();
        let t = self.shaped_like(a, out);
        let ng = self.needs(a);
        Ok(self.push(t, Op::AddConst(a), ng))
    }

    /// Scalar node `s` times vector `v`.
    pub fn scale_by(&mut self, s: Var, v: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("scale_by", self.value(s), self.value(v)));
        }
        let c = self.scalar(s);
        let t = self.unary_out(v, |x| c * x);
        let ng = self.needs(s) || self.needs(v);
        Ok(self.push(t, Op::ScaleBy { s, v }, ng))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.value(a).len();
        if i >= n {
            return Err(Error::Index {
                op: "index",
                detail: format!("{i} of length {n}"),
            });
        }
        let x = self.data(a)[i];
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(x), Op::Index(a, i), ng))
    }

    /// `max(a, floor)` pointwise; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let t = self.unary_out(a, |x| x.max(floor));
        let ng = self.needs(a);
        self.push(t, Op::ClampMin(a, floor), ng)
    }

    /// Row `row` of a 2-D table (embedding lookup).
    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 || row >= t.shape()[0] {
            return Err(Error::Index {
                op: "gather_row",
                detail: format!("row {row} of table {:?}", t.shape()),
            });
        }
        let out = t.row(row).to_vec();
        let ng = self.needs(table);
        Ok(self.push(Tensor::vector(out), Op::GatherRow { table, row }, ng))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(dim_err("dot", at, bt));
        }
        let d = tensor::dot(at.data(), bt.data());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b), ng))
    }

    /// `−log softmax(logits)[target]`, computed with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.data(logits);
        if target >= z.len() {
            return Err(Error::Index {
                op: "cross_entropy",
                detail: format!("target {target} of {} classes", z.len()),
            });
        }
        let loss = tensor::log_sum_exp(z) - z[target];
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }, ng))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(contract("mean of zero terms"));
        }
        let stacked = self.concat(items)?;
        let s = self.sum(stacked);
        Ok(self.scale(s, 1.0 / items.len() as f64))
    }

    /// Adjoint pass from a scalar `loss`, visiting nodes in reverse append order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Constant => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatVec { m, v, rows, cols } => {
                let vd = val(v);
                if let Some(gm) = slot(nodes, grads, m) {
                    for i in 0..rows {
                        let gi = g[i];
                        let row = &mut gm[i * cols..(i + 1) * cols];
                        for (r, &x) in row.iter_mut().zip(vd) {
                            *r += gi * x;
                        }
                    }
                }
                let md = val(m);
                if let Some(gv) = slot(nodes, grads, v) {
                    for i in 0..rows {
                        let gi = g[i];
                        for (r, &w) in gv.iter_mut().zip(&md[i * cols..(i + 1) * cols]) {
                            *r += w * gi;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(ga) = slot(nodes, grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                let bd = val(b);
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(bd) {
                        *x += y * z;
                    }
                }
                let ad = val(a);
                if let Some(gb) = slot(nodes, grads, b) {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(ad) {
                        *x += y * z;
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let out = node.value.data();
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * s * (1.0 - s);
                    }
                }
            }
            &Op::Tanh(a) => {
                let out = node.value.data();
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, y), t) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * (1.0 - t * t);
                    }
                }
            }
            &Op::Log(a) => {
                let ad = val(a);
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(ad) {
                        *x += y / z;
                    }
                }
            }
            &Op::Exp(a) => {
                let out = node.value.data();
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, y), e) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * e;
                    }
                }
            }
            &Op::Neg(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Softmax(z) => {
                let s = node.value.data();
                let gs = tensor::dot(g, s);
                if let Some(gz) = slot(nodes, grads, z) {
                    for ((x, y), si) in gz.iter_mut().zip(g).zip(s) {
                        *x += si * (y - gs);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot(nodes, grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            &Op::Slice { a, lo } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga[lo..lo + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            &Op::AddConst(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            &Op::ScaleBy { s, v } => {
                let vd = val(v);
                let gs_val = tensor::dot(g, vd);
                if let Some(gs) = slot(nodes, grads, s) {
                    gs[0] += gs_val;
                }
                let c = val(s)[0];
                if let Some(gv) = slot(nodes, grads, v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            &Op::Index(a, i) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga[i] += g[0];
                }
            }
            &Op::ClampMin(a, floor) => {
                let ad = val(a);
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(ad) {
                        if *z > floor {
                            *x += y;
                        }
                    }
                }
            }
            &Op::GatherRow { table, row } => {
                let cols = nodes[table.0].value.cols();
                if let Some(gt) = slot(nodes, grads, table) {
                    gt[row * cols..(row + 1) * cols]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            &Op::Dot(a, b) => {
                let bd = val(b);
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(bd).for_each(|(x, y)| *x += g[0] * y);
                }
                let ad = val(a);
                if let Some(gb) = slot(nodes, grads, b) {
                    gb.iter_mut().zip(ad).for_each(|(x, y)| *x += g[0] * y);
                }
            }
            &Op::CrossEntropy { logits, target } => {
                let z = val(logits);
                let mut p = vec![0.0; z.len()];
                tensor::softmax_into(z, &mut p);
                p[target] -= 1.0;
                if let Some(gz) = slot(nodes, grads, logits) {
                    gz.iter_mut().zip(&p).for_each(|(x, y)| *x += g[0] * y);
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}
