use std::collections::BTreeMap;

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Identifier of a trainable matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Relu(usize),
    Transpose(usize),
    Scale(usize, T),
    SqFrobenius(usize),
    Sum(usize),
    Mean(usize),
    /// Row-wise softmax cross-entropy, one loss per row.
    CrossEntropy { logits: usize, probs: Matrix<T>, labels: Vec<usize> },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Linear record of a forward pass, replayed backward for exact gradients.
pub struct GradTape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, usize)>,
}

/// Gradient of a scalar with respect to every trainable matrix on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Matrix<T>>,
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.grads.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Matrix<T>) {
        self.grads.insert(id, grad);
    }

    /// Adds `other` into `self`, id by id. Ids only present in `other` are copied.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(mine) => mine.add_assign(g)?,
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        Self { grads: self.grads.iter().map(|(&k, v)| (k, v.scale(s))).collect() }
    }

    /// Elementwise mean of several gradient maps with identical keys.
    pub fn mean(maps: &[Self]) -> Result<Self> {
        let first = maps.first().ok_or(Error::Empty("gradient maps"))?;
        let mut acc = first.clone();
        for m in &maps[1..] {
            acc.accumulate(m)?;
        }
        Ok(acc.scale(T::one() / T::of(maps.len() as f64)))
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable matrix. Gradients are reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Matrix<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((id, v.0));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a.0, s))
    }

    pub fn sq_frobenius(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).frobenius_sq());
        self.push(value, Op::SqFrobenius(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(value, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::filled(1, 1, m.sum() / T::of(m.len() as f64));
        self.push(value, Op::Mean(a.0))
    }

    /// Softmax cross-entropy of `logits` (batch x classes) against class
    /// indices. Returns the per-sample losses (batch x 1) and their mean.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Var)> {
        let (losses, probs) = softmax_xent(self.value(logits), labels)?;
        let per_sample = self.push(
            losses,
            Op::CrossEntropy { logits: logits.0, probs, labels: labels.to_vec() },
        );
        let mean = self.mean(per_sample);
        Ok((per_sample, mean))
    }

    /// Gradients of a 1x1 `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        self.backward_seeded(loss, Matrix::filled(1, 1, T::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `root`) back
    /// to every trainable leaf.
    pub fn backward_seeded(&self, root: Var, seed: Matrix<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                left: seed.shape(),
                right: self.value(root).shape(),
            });
        }
        let mut adj: Vec<Option<Matrix<T>>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(&self.nodes[*b].value)?;
                    let db = self.nodes[*a].value.matmul_tn(&g)?;
                    accumulate(&mut adj, *a, da)?;
                    accumulate(&mut adj, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone())?;
                    accumulate(&mut adj, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.scale(-T::one()))?;
                    accumulate(&mut adj, *a, g)?;
                }
                Op::Relu(a) => {
                    let input = &self.nodes[*a].value;
                    let mut d = g;
                    for (dv, &x) in d.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if x <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    accumulate(&mut adj, *a, d)?;
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose())?,
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scale(*s))?,
                Op::SqFrobenius(a) => {
                    let s = g.get(0, 0) * T::of(2.0);
                    accumulate(&mut adj, *a, self.nodes[*a].value.scale(s))?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    accumulate(&mut adj, *a, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::Mean(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    let v = g.get(0, 0) / T::of((r * c) as f64);
                    accumulate(&mut adj, *a, Matrix::filled(r, c, v))?;
                }
                Op::CrossEntropy { logits, probs, labels } => {
                    let mut d = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        d.set(r, label, d.get(r, label) - T::one());
                        let s = g.get(r, 0);
                        for c in 0..d.cols() {
                            d.set(r, c, d.get(r, c) * s);
                        }
                    }
                    accumulate(&mut adj, *logits, d)?;
                }
            }
        }

        let mut grads = Gradients { grads: BTreeMap::new() };
        for &(id, node) in &self.params {
            let g = match adj[..].get(node).and_then(|g| g.as_ref()) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = self.nodes[node].value.shape();
                    Matrix::zeros(r, c)
                }
            };
            match grads.grads.get_mut(&id) {
                Some(existing) => existing.add_assign(&g)?,
                None => {
                    grads.grads.insert(id, g);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Matrix<T>>], idx: usize, g: Matrix<T>) -> Result<()> {
    match &mut adj[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn softmax_xent<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(Matrix<T>, Matrix<T>)> {
    if logits.rows() != labels.len() {
        return Err(Error::LabelCount { expected: logits.rows(), got: labels.len() });
    }
    let classes = logits.cols();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut probs = Matrix::zeros(logits.rows(), classes);
    let mut losses = Matrix::zeros(logits.rows(), 1);
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        for (c, &v) in row.iter().enumerate() {
            probs.set(r, c, (v - log_z).exp());
        }
        losses.set(r, 0, log_z - row[label]);
    }
    Ok((losses, probs))
}

/// Mean softmax cross-entropy over the batch (rows of `logits`).
pub fn cross_entropy_loss<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<T> {
    let (losses, _) = softmax_xent(logits, labels)?;
    Ok(losses.sum() / T::of(labels.len() as f64))
}

/// One gradient map per sample, from a per-sample loss column recorded on
/// `tape`. Their mean equals the gradient of the mean loss.
pub fn per_sample_gradients<T: Scalar>(tape: &GradTape<T>, per_sample: Var) -> Result<Vec<Gradients<T>>> {
    let (n, cols) = tape.value(per_sample).shape();
    if cols != 1 {
        return Err(Error::ShapeMismatch { op: "per_sample_gradients", left: (n, cols), right: (n, 1) });
    }
    (0..n)
        .map(|j| {
            let mut seed = Matrix::zeros(n, 1);
            seed.set(j, 0, T::one());
            tape.backward_seeded(per_sample, seed)
        })
        .collect()
}
