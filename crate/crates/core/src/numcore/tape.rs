//! Reverse-mode gradients over a recorded operation tape.
//!
//! A [`Tape`] is append-only, so node indices are already a topological
//! order of the computation. [`Tape::backward`] walks it in reverse and
//! accumulates into the [`ParamStore`] gradients.
//!
//! ReLU uses subgradient 0 at exactly 0.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Stable handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Owns every learnable tensor, addressable by insertion index or name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Compressed per-row neighbor index lists used by [`Tape::gather_mean`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborLists {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl NeighborLists {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for l in lists {
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.indices[self.offsets[row]..self.offsets[row + 1]]
    }

    pub fn degree(&self, row: usize) -> usize {
        self.offsets[row + 1] - self.offsets[row]
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Row-wise neighbor mean of `x` (rows = blocks of `n_rows`); empty rows give zeros.
    pub fn gather_mean(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.n_rows();
        let (rows, cols) = (x.rows(), x.cols());
        if x.shape().len() != 2 || rows % n != 0 {
            return Err(Error::dim("gather_mean", x.shape(), &[n, cols]));
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        let src = x.data();
        let dst = out.data_mut();
        for block in 0..rows / n {
            let base = block * n;
            for u in 0..n {
                let nb = self.neighbors(u);
                if nb.is_empty() {
                    continue;
                }
                let inv = 1.0 / nb.len() as f64;
                let o = &mut dst[(base + u) * cols..(base + u + 1) * cols];
                for &v in nb {
                    let s = &src[(base + v) * cols..(base + v + 1) * cols];
                    for (a, b) in o.iter_mut().zip(s) {
                        *a += b;
                    }
                }
                for a in o.iter_mut() {
                    *a *= inv;
                }
            }
        }
        Ok(out)
    }

    fn gather_mean_backward(&self, grad_out: &Tensor) -> Tensor {
        let n = self.n_rows();
        let (rows, cols) = (grad_out.rows(), grad_out.cols());
        let mut grad_in = Tensor::zeros(&[rows, cols]);
        let g = grad_out.data();
        let dst = grad_in.data_mut();
        for block in 0..rows / n {
            let base = block * n;
            for u in 0..n {
                let nb = self.neighbors(u);
                if nb.is_empty() {
                    continue;
                }
                let inv = 1.0 / nb.len() as f64;
                let go = &g[(base + u) * cols..(base + u + 1) * cols];
                for &v in nb {
                    let d = &mut dst[(base + v) * cols..(base + v + 1) * cols];
                    for (a, b) in d.iter_mut().zip(go) {
                        *a += b * inv;
                    }
                }
            }
        }
        grad_in
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    AddScalar(Var),
    Relu(Var),
    Concat { parts: Vec<Var>, axis: usize },
    GatherMean(Var, Arc<NeighborLists>),
    Mse { pred: Var, target: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `[1 × n]` (or `[n]`) bias to every row of an `[m × n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if xv.shape().len() != 2 || bv.len() != n {
            return Err(Error::dim("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    /// Broadcast-adds a constant scalar.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).relu();
        self.push(v, Op::Relu(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn gather_mean(&mut self, x: Var, lists: &Arc<NeighborLists>) -> Result<Var> {
        let v = lists.gather_mean(self.value(x))?;
        Ok(self.push(v, Op::GatherMean(x, Arc::clone(lists))))
    }

    /// Scalar mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let loss = Tensor::mse(self.value(pred), &target)?;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }))
    }

    /// Accumulates `∂loss/∂param` into every reachable parameter's `grad`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    if p.grad.shape() != g.shape() {
                        return Err(Error::dim("backward", p.grad.shape(), g.shape()));
                    }
                    p.grad.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRowBias(x, bias) => {
                    let bshape = self.value(*bias).shape().to_vec();
                    let n = bshape.iter().product();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::new(&bshape, db)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Relu(x) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.value(p).shape()[*axis];
                        accumulate(&mut grads, p, g.narrow(*axis, start, len)?);
                        start += len;
                    }
                }
                Op::GatherMean(x, lists) => {
                    accumulate(&mut grads, *x, lists.gather_mean_backward(&g));
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let scale = 2.0 * g.data()[0] / pv.len() as f64;
                    let d = pv.sub(target)?.scale(scale);
                    accumulate(&mut grads, *pred, d);
                }
            }
        }
        Ok(())
    }
}
