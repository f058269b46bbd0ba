//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape from the loss to the leaves and accumulates parameter
//! gradients into the owning [`ParamStore`].

use std::collections::HashMap;

use super::loss::weighted_cross_entropy;
use super::{NdArray, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Gather { table: Var, rows: Vec<usize> },
    /// Row `i` comes from `on` where `mask[i]`, else from `off`.
    Select { mask: Vec<bool>, on: Var, off: Var },
    CrossEntropy { logits: Var, grad: NdArray },
    SqDist { input: Var, grad: NdArray },
    LinComb(Vec<(Var, f64)>),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

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

    fn push(&mut self, value: NdArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter; repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let cols = xv.cols();
        if bv.len() != cols || xv.shape().len() != 2 {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Column-wise concatenation of `[batch, *]` matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = NdArray::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Row-wise stacking of `[*, cols]` matrices.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(Error::shape("stack_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
            rows += self.value(*p).rows();
        }
        let out = NdArray::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::StackRows(parts.to_vec())))
    }

    /// Looks up rows of a `[vocab, dim]` table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let vocab = t.rows();
        if let Some(bad) = rows.iter().find(|r| **r >= vocab) {
            return Err(Error::shape("gather", format!("row {bad} of {vocab}")));
        }
        let dim = t.cols();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            data.extend_from_slice(t.row(*r));
        }
        let out = NdArray::matrix(rows.len(), dim, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Per-row choice between two equally shaped matrices.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        self.same_shape("select_rows", on, off)?;
        let (a, b) = (self.value(on), self.value(off));
        if a.rows() != mask.len() {
            return Err(Error::shape("select_rows", "mask length"));
        }
        let mut data = Vec::with_capacity(a.len());
        for (i, m) in mask.iter().enumerate() {
            data.extend_from_slice(if *m { a.row(i) } else { b.row(i) });
        }
        let out = NdArray::new(a.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Select {
                mask: mask.to_vec(),
                on,
                off,
            },
        ))
    }

    /// Weighted mean cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (loss, grad) = weighted_cross_entropy(self.value(logits), labels, weights)?;
        Ok(self.push(NdArray::vector(vec![loss]), Op::CrossEntropy { logits, grad }))
    }

    /// `scale · mean_i ‖input_i − target_i‖²` with a constant target.
    pub fn sq_dist(&mut self, input: Var, target: &NdArray, scale: f64) -> Result<Var> {
        let (loss, grad) = super::loss::mse_loss(self.value(input), target)?;
        let grad = grad.map(|g| g * scale);
        Ok(self.push(NdArray::vector(vec![scale * loss]), Op::SqDist { input, grad }))
    }

    /// `Σ cᵢ·vᵢ` over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|(t, c)| c * self.scalar(*t)).sum();
        self.push(NdArray::vector(vec![v]), Op::LinComb(terms.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        self.push(NdArray::vector(vec![v]), Op::SumAll(a))
    }

    /// Accumulates `d loss / d param` into `store` for every parameter
    /// bound on this tape. A tape may be differentiated once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<NdArray>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::filled(self.value(loss).shape(), 1.0));

        fn acc(grads: &mut [Option<NdArray>], v: Var, g: NdArray) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let db = NdArray::new(self.value(*b).shape().to_vec(), db)?;
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip(self.value(*b), |x, y| x * y);
                    let db = g.zip(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip(&node.value, |x, y| x * y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip(&node.value, |x, y| x * (1.0 - y * y));
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = g.zip(&node.value, |x, y| if y > 0.0 { x } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        offset += c;
                        acc(&mut grads, *p, NdArray::matrix(rows, c, data)?);
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.value(*p).shape().to_vec();
                        let n = self.value(*p).len();
                        let part = NdArray::new(shape, g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        acc(&mut grads, *p, part);
                    }
                }
                Op::Gather { table, rows } => {
                    let t = self.value(*table);
                    let dim = t.cols();
                    let mut dt = NdArray::zeros(t.shape());
                    for (i, r) in rows.iter().enumerate() {
                        let src = &g.data()[i * dim..(i + 1) * dim];
                        let dst = &mut dt.data_mut()[r * dim..(r + 1) * dim];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Select { mask, on, off } => {
                    let cols = g.cols();
                    let mut d_on = g.clone();
                    let mut d_off = g;
                    for (i, m) in mask.iter().enumerate() {
                        let zeroed = if *m { &mut d_off } else { &mut d_on };
                        zeroed.data_mut()[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .for_each(|v| *v = 0.0);
                    }
                    acc(&mut grads, *on, d_on);
                    acc(&mut grads, *off, d_off);
                }
                Op::CrossEntropy { logits, grad } => {
                    let s = g.data()[0];
                    acc(&mut grads, *logits, grad.map(|v| v * s));
                }
                Op::SqDist { input, grad } => {
                    let s = g.data()[0];
                    acc(&mut grads, *input, grad.map(|v| v * s));
                }
                Op::LinComb(terms) => {
                    let s = g.data()[0];
                    for (t, c) in terms {
                        acc(&mut grads, *t, NdArray::vector(vec![c * s]));
                    }
                }
                Op::SumAll(a) => {
                    let s = g.data()[0];
                    acc(&mut grads, *a, NdArray::filled(self.value(*a).shape(), s));
                }
            }
        }
        Ok(())
    }
}
