use rand::Rng;

use crate::error::{Error, Result};

use super::kernel::{gemm, Layout};
use super::{Gradients, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    GraphMix { adj: Var, h: Var },
    Silu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Dropout { x: Var, mask: Vec<f32> },
    Mse { pred: Var, target: Var },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward pass over parameters borrowed from a
/// [`ParamStore`].
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward sweep is a single reverse scan. An
/// inference tape computes identical values but keeps no backward links.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    recording: bool,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise `x * sigmoid(x)`.
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates without recording backward structure.
    pub fn inference(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            recording: false,
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

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (op, requires_grad) = if self.recording {
            (op, requires_grad)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input. Inputs never receive gradients.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.get(id).trainable && self.recording;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: if self.recording { Op::Param(id) } else { Op::Leaf },
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x * wᵀ + b` for a batch `x` of shape `[rows, n]`, weight `[m, n]`
    /// and optional bias `[m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.rank() != 2 || wt.cols() != xt.cols() {
            return Err(Error::dim("affine input vs weight", xt.shape(), wt.shape()));
        }
        let (rows, n, m) = (xt.rows(), xt.cols(), wt.rows());
        let mut out = vec![0.0; rows * m];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != m {
                return Err(Error::dim("affine weight vs bias", wt.shape(), bt.shape()));
            }
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bt.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            rows,
            n,
            m,
            1.0,
            xt.data(),
            Layout::Normal,
            wt.data(),
            Layout::Transposed,
            beta,
            &mut out,
        );
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = m;
        let req = self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Affine { x, w, b }, req))
    }

    /// Matrix product `a * b` of `[m, k]` and `[k, n]` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.cols() != bt.rows() || bt.rank() != 2 {
            return Err(Error::dim("matmul", at.shape(), bt.shape()));
        }
        let (m, k, n) = (at.rows(), at.cols(), bt.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            at.data(),
            Layout::Normal,
            bt.data(),
            Layout::Normal,
            0.0,
            &mut out,
        );
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, req))
    }

    /// Applies a `[J, J]` mixing matrix to each consecutive group of `J`
    /// rows of `h`, i.e. `A * h_g` for every sample `g` in the batch.
    pub fn graph_mix(&mut self, adj: Var, h: Var) -> Result<Var> {
        let (at, ht) = (self.value(adj), self.value(h));
        let j = at.rows();
        if at.rank() != 2 || at.cols() != j || j == 0 || ht.rows() % j != 0 {
            return Err(Error::dim("graph_mix adjacency vs features", at.shape(), ht.shape()));
        }
        let d = ht.cols();
        let mut out = vec![0.0; ht.len()];
        for (hg, og) in ht.data().chunks_exact(j * d).zip(out.chunks_exact_mut(j * d)) {
            gemm(j, j, d, 1.0, at.data(), Layout::Normal, hg, Layout::Normal, 0.0, og);
        }
        let shape = ht.shape().to_vec();
        let req = self.requires(adj) || self.requires(h);
        Ok(self.push(Tensor::new(shape, out)?, Op::GraphMix { adj, h }, req))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| silu(v)).collect();
        let t = Tensor::new(xt.shape().to_vec(), data).expect("same length");
        let req = self.requires(x);
        self.push(t, Op::Silu(x), req)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<(Tensor, bool)> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::dim(name, at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let req = self.requires(a) || self.requires(b);
        Ok((Tensor::new(at.shape().to_vec(), data)?, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, req) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, req) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), req))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero parts".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::dim("concat rows", self.value(*first).shape(), t.shape()));
            }
            cols += t.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::Concat(parts.to_vec()), req))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let req = self.requires(x);
        Ok(self.push(t, Op::Reshape(x), req))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Outside training, or at rate 0, returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xt = self.value(x);
        let mask: Vec<f32> = (0..xt.len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        let req = self.requires(x);
        Ok(self.push(t, Op::Dropout { x, mask }, req))
    }

    /// Mean of squared differences over all elements; a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pt, tt) = (self.value(pred), self.value(target));
        if pt.shape() != tt.shape() {
            return Err(Error::dim("mse prediction vs target", pt.shape(), tt.shape()));
        }
        if pt.is_empty() {
            return Err(Error::Usage("mse of empty tensors".into()));
        }
        let sum: f32 = pt.data().iter().zip(tt.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let req = self.requires(pred) || self.requires(target);
        Ok(self.push(Tensor::scalar(sum / pt.len() as f32), Op::Mse { pred, target }, req))
    }

    /// Reverse sweep from the scalar `loss`, seeded with `loss_gradient`.
    ///
    /// Returns parameter gradients; add them to the store with
    /// [`ParamStore::accumulate`]. Calling twice yields the same result,
    /// so accumulating twice doubles the stored gradients.
    pub fn backward(&self, loss: Var, loss_gradient: f32) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        if !self.recording {
            return Err(Error::Usage("backward called on an inference tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![loss_gradient])?);
        let mut out = Gradients {
            slots: vec![None; self.store.len()],
        };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out.slots[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::Affine { x, w, b } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let (rows, n, m) = (xt.rows(), xt.cols(), wt.rows());
                    if self.requires(*x) {
                        let mut dx = vec![0.0; rows * n];
                        gemm(
                            rows,
                            m,
                            n,
                            1.0,
                            g.data(),
                            Layout::Normal,
                            wt.data(),
                            Layout::Normal,
                            0.0,
                            &mut dx,
                        );
                        accumulate(&mut grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
                    }
                    if self.requires(*w) {
                        let mut dw = vec![0.0; m * n];
                        gemm(
                            m,
                            rows,
                            n,
                            1.0,
                            g.data(),
                            Layout::Transposed,
                            xt.data(),
                            Layout::Normal,
                            0.0,
                            &mut dw,
                        );
                        accumulate(&mut grads, *w, Tensor::new(wt.shape().to_vec(), dw)?);
                    }
                    if let Some(b) = b.filter(|b| self.requires(*b)) {
                        let mut db = vec![0.0; m];
                        for row in g.data().chunks_exact(m) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, b, Tensor::new(self.value(b).shape().to_vec(), db)?);
                    }
                }
                Op::MatMul { a, b } => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                    if self.requires(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            g.data(),
                            Layout::Normal,
                            bt.data(),
                            Layout::Transposed,
                            0.0,
                            &mut da,
                        );
                        accumulate(&mut grads, *a, Tensor::new(at.shape().to_vec(), da)?);
                    }
                    if self.requires(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            at.data(),
                            Layout::Transposed,
                            g.data(),
                            Layout::Normal,
                            0.0,
                            &mut db,
                        );
                        accumulate(&mut grads, *b, Tensor::new(bt.shape().to_vec(), db)?);
                    }
                }
                Op::GraphMix { adj, h } => {
                    let (at, ht) = (self.value(*adj), self.value(*h));
                    let (j, d) = (at.rows(), ht.cols());
                    let groups = g.data().chunks_exact(j * d).zip(ht.data().chunks_exact(j * d));
                    if self.requires(*h) {
                        let mut dh = vec![0.0; ht.len()];
                        for (gg, dg) in g.data().chunks_exact(j * d).zip(dh.chunks_exact_mut(j * d)) {
                            gemm(j, j, d, 1.0, at.data(), Layout::Transposed, gg, Layout::Normal, 0.0, dg);
                        }
                        accumulate(&mut grads, *h, Tensor::new(ht.shape().to_vec(), dh)?);
                    }
                    if self.requires(*adj) {
                        let mut da = vec![0.0; j * j];
                        for (gg, hg) in groups {
                            gemm(j, d, j, 1.0, gg, Layout::Normal, hg, Layout::Transposed, 1.0, &mut da);
                        }
                        accumulate(&mut grads, *adj, Tensor::new(at.shape().to_vec(), da)?);
                    }
                }
                Op::Silu(x) => {
                    let xt = self.value(*x);
                    let dx = xt
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| {
                            let s = sigmoid(v);
                            gv * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
                }
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (self.value(*a), self.value(*b));
                    if self.requires(*a) {
                        let d = g.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, Tensor::new(at.shape().to_vec(), d)?);
                    }
                    if self.requires(*b) {
                        let d = g.data().iter().zip(at.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, Tensor::new(bt.shape().to_vec(), d)?);
                    }
                }
                Op::Concat(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pt = self.value(p);
                        let pc = pt.cols();
                        if self.requires(p) {
                            let mut d = Vec::with_capacity(pt.len());
                            for row in g.data().chunks_exact(cols) {
                                d.extend_from_slice(&row[offset..offset + pc]);
                            }
                            accumulate(&mut grads, p, Tensor::new(pt.shape().to_vec(), d)?);
                        }
                        offset += pc;
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshaped(shape)?);
                }
                Op::Dropout { x, mask } => {
                    let d = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Mse { pred, target } => {
                    let (pt, tt) = (self.value(*pred), self.value(*target));
                    let scale = 2.0 * g.data()[0] / pt.len() as f32;
                    let diff: Vec<f32> = pt.data().iter().zip(tt.data()).map(|(p, t)| scale * (p - t)).collect();
                    if self.requires(*target) {
                        let neg = diff.iter().map(|v| -v).collect();
                        accumulate(&mut grads, *target, Tensor::new(tt.shape().to_vec(), neg)?);
                    }
                    if self.requires(*pred) {
                        accumulate(&mut grads, *pred, Tensor::new(pt.shape().to_vec(), diff)?);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
