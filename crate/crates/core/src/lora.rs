//! LoRA-adapted MLP: frozen base weights plus trainable low-rank factors.
//!
//! Every linear layer computes `h = W0·x + B·(A·x)` on column-major batches
//! (`x` is `in x batch`). ReLU separates layers; the last layer is the
//! classification head and also carries LoRA factors.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GradTape, Gradients, Matrix, ParamId, Var};

/// Which Gram matrix of `A` the orthogonality penalty constrains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OrthConvention {
    /// `‖AᵀA − I‖² + ‖BᵀB − I‖²`. For wide `A` the first term never drops
    /// below `in − r`.
    #[default]
    Literal,
    /// `‖AAᵀ − I‖² + ‖BᵀB − I‖²`, which reaches zero for orthonormal factors.
    GramSmall,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer<T> {
    w0: Matrix<T>,
    a: Matrix<T>,
    b: Matrix<T>,
}

impl<T: Scalar> LoraLayer<T> {
    /// `w0` is `out x in`, `a` is `r x in`, `b` is `out x r`, `0 < r < min(in, out)`.
    pub fn new(w0: Matrix<T>, a: Matrix<T>, b: Matrix<T>) -> Result<Self> {
        let (out, input) = w0.shape();
        let rank = a.rows();
        if rank == 0 || rank >= input.min(out) {
            return Err(Error::RankBound { rank, input, output: out });
        }
        if a.cols() != input {
            return Err(Error::ShapeMismatch { op: "lora A", left: w0.shape(), right: a.shape() });
        }
        if b.shape() != (out, rank) {
            return Err(Error::ShapeMismatch { op: "lora B", left: w0.shape(), right: b.shape() });
        }
        Ok(Self { w0, a, b })
    }

    /// Zero `B`, Gaussian `A` with standard deviation `a_std`, so the
    /// adapted layer starts out identical to `w0`.
    pub fn init<R: Rng + ?Sized>(w0: Matrix<T>, rank: usize, a_std: f64, rng: &mut R) -> Result<Self> {
        let (out, input) = w0.shape();
        if rank == 0 || rank >= input.min(out) {
            return Err(Error::RankBound { rank, input, output: out });
        }
        let a = gaussian(rank, input, a_std, rng);
        Self::new(w0, a, Matrix::zeros(out, rank))
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn base(&self) -> &Matrix<T> {
        &self.w0
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix<T> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix<T> {
        &mut self.b
    }

    /// `W0·x + B·(A·x)`.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.rows() != self.in_dim() {
            return Err(Error::ShapeMismatch { op: "lora_forward", left: self.w0.shape(), right: x.shape() });
        }
        let base = self.w0.matmul(x)?;
        let delta = self.b.matmul(&self.a.matmul(x)?)?;
        base.add(&delta)
    }

    /// `W0 + B·A`.
    pub fn effective_weight(&self) -> Matrix<T> {
        let delta = self.b.matmul(&self.a).expect("factor shapes checked at construction");
        self.w0.add(&delta).expect("delta shaped like W0")
    }
}

/// Orthogonality penalty on one layer's factors.
pub fn orth_regularizer<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, convention: OrthConvention) -> T {
    let gram_a = match convention {
        OrthConvention::Literal => a.matmul_tn(a),
        OrthConvention::GramSmall => a.matmul_nt(a),
    }
    .expect("gram shapes always agree");
    let gram_b = b.matmul_tn(b).expect("gram shapes always agree");
    let off = |g: &Matrix<T>| {
        let eye = Matrix::identity(g.rows());
        g.sub(&eye).expect("square gram").frobenius_sq()
    };
    off(&gram_a) + off(&gram_b)
}

fn orth_regularizer_tape<T: Scalar>(tape: &mut GradTape<T>, a: Var, b: Var, convention: OrthConvention) -> Result<Var> {
    let gram_a = match convention {
        OrthConvention::Literal => {
            let at = tape.transpose(a);
            tape.matmul(at, a)?
        }
        OrthConvention::GramSmall => {
            let at = tape.transpose(a);
            tape.matmul(a, at)?
        }
    };
    let bt = tape.transpose(b);
    let gram_b = tape.matmul(bt, b)?;
    let eye_a = tape.constant(Matrix::identity(tape.value(gram_a).rows()));
    let eye_b = tape.constant(Matrix::identity(tape.value(gram_b).rows()));
    let da = tape.sub(gram_a, eye_a)?;
    let db = tape.sub(gram_b, eye_b)?;
    let na = tape.sq_frobenius(da);
    let nb = tape.sq_frobenius(db);
    tape.add(na, nb)
}

/// Layer widths and initialization scales of a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// LoRA rank of the hidden layers.
    pub rank: usize,
    /// LoRA rank of the classification head.
    pub head_rank: usize,
    /// Base weights are drawn from `N(0, base_gain² / in)`.
    pub base_gain: f64,
    /// Standard deviation of the Gaussian `A` initialization.
    pub a_init_std: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden: vec![32],
            classes: 4,
            rank: 8,
            head_rank: 2,
            base_gain: 1.0,
            a_init_std: 0.02,
        }
    }
}

impl ModelSpec {
    /// `(in, out, rank)` of every layer, head last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.classes);
        let n = dims.len() - 1;
        (0..n)
            .map(|l| (dims[l], dims[l + 1], if l + 1 == n { self.head_rank } else { self.rank }))
            .collect()
    }
}

/// MLP of LoRA layers with ReLU in between. Trainable parameters are exactly
/// the `A` and `B` factors of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    layers: Vec<LoraLayer<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::new();
        for (input, out, rank) in spec.layer_shapes() {
            let w0 = gaussian(out, input, spec.base_gain / (input as f64).sqrt(), rng);
            layers.push(LoraLayer::init(w0, rank, spec.a_init_std, rng)?);
        }
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<LoraLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("model layers"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch {
                    op: "layer chain",
                    left: pair[0].base().shape(),
                    right: pair[1].base().shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LoraLayer<T>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LoraLayer<T> {
        &mut self.layers[l]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn a_id(layer: usize) -> ParamId {
        ParamId(2 * layer)
    }

    pub fn b_id(layer: usize) -> ParamId {
        ParamId(2 * layer + 1)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.layers.len()).flat_map(|l| [Self::a_id(l), Self::b_id(l)]).collect()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        let layer = self.layers.get(id.0 / 2)?;
        Some(if id.0.is_multiple_of(2) { &layer.a } else { &layer.b })
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Matrix<T>> {
        let layer = self.layers.get_mut(id.0 / 2)?;
        Some(if id.0.is_multiple_of(2) { &mut layer.a } else { &mut layer.b })
    }

    pub fn param_name(id: ParamId) -> String {
        format!("L{}.{}", id.0 / 2, if id.0.is_multiple_of(2) { "A" } else { "B" })
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().map(|l| l.a.len() + l.b.len()).sum()
    }

    /// Records the forward pass for `x` (`in x batch`) and returns the
    /// logits as `batch x classes`.
    pub fn forward_tape(&self, tape: &mut GradTape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let w0 = tape.constant(layer.w0.clone());
            let a = tape.param(Self::a_id(l), layer.a.clone());
            let b = tape.param(Self::b_id(l), layer.b.clone());
            let base = tape.matmul(w0, h)?;
            let ax = tape.matmul(a, h)?;
            let bax = tape.matmul(b, ax)?;
            h = tape.add(base, bax)?;
            if l + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(tape.transpose(h))
    }

    /// Logits (`batch x classes`) for inputs `x` (`in x batch`).
    pub fn logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if l + 1 < self.layers.len() {
                h = h.map(|v| v.max(T::zero()));
            }
        }
        Ok(h.transpose())
    }

    pub fn predict(&self, x: &Matrix<T>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Sum of the per-layer orthogonality penalties, unscaled.
    pub fn orth_penalty(&self, convention: OrthConvention) -> T {
        self.layers.iter().map(|l| orth_regularizer(&l.a, &l.b, convention)).sum()
    }

    /// Records `coef · Σ_layers R(A, B)` on a fresh parameter set of `tape`.
    pub fn orth_penalty_tape(&self, tape: &mut GradTape<T>, coef: T, convention: OrthConvention) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = tape.param(Self::a_id(l), layer.a.clone());
            let b = tape.param(Self::b_id(l), layer.b.clone());
            let r = orth_regularizer_tape(tape, a, b, convention)?;
            total = Some(match total {
                Some(t) => tape.add(t, r)?,
                None => r,
            });
        }
        let total = total.expect("model has at least one layer");
        Ok(tape.scale(total, coef))
    }

    /// `θ ← θ − lr·g` on every `A` and `B`. Base weights are never touched.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: T) -> Result<()> {
        let ids = self.trainable_ids();
        for &id in &ids {
            let g = grads.get(id).ok_or_else(|| Error::MissingGradient(Self::param_name(id)))?;
            let p = self.param(id).expect("own id");
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch { op: "sgd_step", left: p.shape(), right: g.shape() });
            }
        }
        for id in ids {
            let g = grads.get(id).expect("checked above");
            let p = self.param_mut(id).expect("own id");
            for (w, &d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *w = *w - lr * d;
            }
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(x, y)| {
                x.w0.shape() == y.w0.shape() && x.a.shape() == y.a.shape() && x.b.shape() == y.b.shape()
            })
    }

    pub fn check_architecture(&self, other: &Self) -> Result<()> {
        if self.same_architecture(other) {
            Ok(())
        } else {
            Err(Error::ArchitectureMismatch("models differ in layer shapes".into()))
        }
    }

    /// Fingerprint of the frozen base weights (bit patterns, in layer order).
    pub fn base_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for layer in &self.layers {
            layer.w0.shape().hash(&mut h);
            for v in layer.w0.as_slice() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// `w_self·θ_self + (1 − w_self)·θ_other` over all trainable parameters.
    pub fn blend(&self, other: &Self, w_self: T) -> Result<Self> {
        self.check_architecture(other)?;
        let mut out = self.clone();
        let w_other = T::one() - w_self;
        for id in self.trainable_ids() {
            let theirs = other.param(id).expect("same architecture");
            let mine = out.param_mut(id).expect("own id");
            for (m, &t) in mine.as_mut_slice().iter_mut().zip(theirs.as_slice()) {
                *m = w_self * *m + w_other * t;
            }
        }
        Ok(out)
    }

    /// Text checkpoint: a version header, then for each matrix a `name rows
    /// cols` line followed by its rows as 17-significant-digit decimals.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::from("skillfuse-ckpt v1\n");
        for (l, layer) in self.layers.iter().enumerate() {
            for (tag, m) in [("W0", &layer.w0), ("A", &layer.a), ("B", &layer.b)] {
                writeln!(s, "L{l}.{tag} {} {}", m.rows(), m.cols()).unwrap();
                for r in 0..m.rows() {
                    let line: Vec<String> = m.row(r).iter().map(|v| format!("{:.16e}", v.as_f64())).collect();
                    s.push_str(&line.join(" "));
                    s.push('\n');
                }
            }
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let err = |line: usize, reason: &str| Error::Checkpoint { line: line + 1, reason: reason.to_string() };
        match lines.next() {
            Some((_, "skillfuse-ckpt v1")) => {}
            Some((i, _)) => return Err(err(i, "expected header `skillfuse-ckpt v1`")),
            None => return Err(err(0, "empty checkpoint")),
        }
        let mut mats: Vec<(String, Matrix<T>)> = Vec::new();
        while let Some((i, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(err(i, "expected `name rows cols`"));
            }
            let rows: usize = parts[1].parse().map_err(|_| err(i, "bad row count"))?;
            let cols: usize = parts[2].parse().map_err(|_| err(i, "bad column count"))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (j, row) = lines.next().ok_or_else(|| err(i, "truncated matrix"))?;
                let before = data.len();
                for tok in row.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| err(j, "bad float"))?;
                    data.push(T::of(v));
                }
                if data.len() - before != cols {
                    return Err(err(j, "wrong number of columns"));
                }
            }
            let m = Matrix::from_vec(rows, cols, data).map_err(|e| err(i, &e.to_string()))?;
            mats.push((parts[0].to_string(), m));
        }
        if mats.is_empty() || !mats.len().is_multiple_of(3) {
            return Err(err(0, "expected W0, A, B triples"));
        }
        let mut layers = Vec::new();
        for (l, chunk) in mats.chunks(3).enumerate() {
            let expect = [format!("L{l}.W0"), format!("L{l}.A"), format!("L{l}.B")];
            for (k, (name, _)) in chunk.iter().enumerate() {
                if *name != expect[k] {
                    return Err(err(0, &format!("expected {} got {name}", expect[k])));
                }
            }
            layers.push(LoraLayer::new(chunk[0].1.clone(), chunk[1].1.clone(), chunk[2].1.clone())?);
        }
        Self::from_layers(layers)
    }
}

/// `rows x cols` matrix of i.i.d. `N(0, std²)` entries.
pub fn gaussian<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}
