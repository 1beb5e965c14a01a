//! Synthetic task streams with tunable overlap between tasks.
//!
//! Each task is a balanced Gaussian-mixture classification problem. The
//! class means live in a `q`-dimensional discriminative subspace built from
//! `round(ρ·q)` directions shared by every task (with the same class
//! coefficients in every task) plus `q − round(ρ·q)` directions private to
//! the task. All directions are mutually orthonormal.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Labeled feature vectors, stored row-major (`n x dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::LengthMismatch { left: features.len(), right: dim * labels.len() });
        }
        Ok(Self { dim, features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Columns are the selected samples: returns `dim x idx.len()` plus labels.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Matrix<T>, Vec<usize>) {
        let x = Matrix::from_fn(self.dim, idx.len(), |r, c| T::of(self.features[idx[c] * self.dim + r]));
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.sample(i));
        }
        Self { dim: self.dim, features, labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn extend(&mut self, other: &Self) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::LengthMismatch { left: self.dim, right: other.dim });
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// CSV with `x0..x{dim-1}` feature columns and a trailing `label` column.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for j in 0..self.dim {
            write!(s, "x{j},").unwrap();
        }
        s.push_str("label\n");
        for i in 0..self.len() {
            for v in self.sample(i) {
                write!(s, "{v:.17e},").unwrap();
            }
            writeln!(s, "{}", self.labels[i]).unwrap();
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub tasks: usize,
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of the discriminative subspace shared by all tasks.
    pub overlap: f64,
    pub noise: f64,
    /// Dimension of each task's discriminative subspace.
    pub subspace_dim: usize,
    /// Scale of the class-mean coefficients.
    pub separation: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            tasks: 5,
            dim: 64,
            classes: 4,
            n_train: 1000,
            n_val: 200,
            n_test: 200,
            overlap: 0.3,
            noise: 0.5,
            subspace_dim: 8,
            separation: 1.0,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn shared_dims(&self) -> usize {
        (self.overlap * self.subspace_dim as f64).round() as usize
    }

    pub fn private_dims(&self) -> usize {
        self.subspace_dim - self.shared_dims()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::InvalidParameter { name, reason });
        if self.tasks == 0 {
            return bad("tasks", "need at least one task".into());
        }
        if self.dim == 0 || self.subspace_dim == 0 {
            return bad("dim", "dimensions must be positive".into());
        }
        if self.classes < 2 {
            return bad("classes", format!("{} < 2", self.classes));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train", "train and test sets must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap", format!("{} not in [0, 1]", self.overlap));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", format!("{} must be finite and nonnegative", self.noise));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation", format!("{} must be positive", self.separation));
        }
        let needed = self.shared_dims() + self.tasks * self.private_dims();
        if needed > self.dim {
            return bad("dim", format!("{needed} orthonormal directions needed but dim = {}", self.dim));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// Position of the task in the generated (unpermuted) stream.
    pub identity: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Orthonormal directions the class means are built from.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBases {
    pub shared: Vec<Vec<f64>>,
    /// One list of private directions per task identity.
    pub private: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub classes: usize,
    pub bases: SubspaceBases,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train.dim())
    }
}

/// `count` orthonormal vectors in `R^dim` by modified Gram-Schmidt (twice)
/// on Gaussian draws.
fn orthonormal_set<R: rand::Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

pub fn generate_stream(spec: &StreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    let mut rng = substream(spec.seed, Stream::Data);
    let (ns, np) = (spec.shared_dims(), spec.private_dims());
    let all = orthonormal_set(spec.dim, ns + spec.tasks * np, &mut rng);
    let shared = all[..ns].to_vec();
    let private: Vec<Vec<Vec<f64>>> = (0..spec.tasks).map(|k| all[ns + k * np..ns + (k + 1) * np].to_vec()).collect();

    let coef = |n: usize, rng: &mut crate::rng::Rng| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                spec.separation * z
            })
            .collect()
    };
    let shared_coef: Vec<Vec<f64>> = (0..spec.classes).map(|_| coef(ns, &mut rng)).collect();

    let mut tasks = Vec::with_capacity(spec.tasks);
    for (k, private_k) in private.iter().enumerate() {
        let private_coef: Vec<Vec<f64>> = (0..spec.classes).map(|_| coef(np, &mut rng)).collect();
        let means: Vec<Vec<f64>> = (0..spec.classes)
            .map(|c| {
                let mut mu = vec![0.0; spec.dim];
                for (b, &w) in shared.iter().zip(&shared_coef[c]) {
                    mu.iter_mut().zip(b).for_each(|(m, x)| *m += w * x);
                }
                for (b, &w) in private_k.iter().zip(&private_coef[c]) {
                    mu.iter_mut().zip(b).for_each(|(m, x)| *m += w * x);
                }
                mu
            })
            .collect();
        let mut draw = |n: usize| -> Dataset {
            let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
            labels.shuffle(&mut rng);
            let mut features = Vec::with_capacity(n * spec.dim);
            for &l in &labels {
                for &m in &means[l] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push(m + spec.noise * z);
                }
            }
            Dataset { dim: spec.dim, features, labels }
        };
        let train = draw(spec.n_train);
        let val = draw(spec.n_val);
        let test = draw(spec.n_test);
        tasks.push(Task { identity: k, train, val, test });
    }
    Ok(TaskStream { tasks, classes: spec.classes, bases: SubspaceBases { shared, private } })
}

/// Task order for `order_seed`: seed 0 is the generated order, any other seed
/// a seeded shuffle.
pub fn order_permutation(tasks: usize, order_seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..tasks).collect();
    if order_seed != 0 {
        let mut rng = substream(order_seed, Stream::Order);
        perm.shuffle(&mut rng);
        // a non-identity seed should reorder whenever it can
        if tasks > 1 && perm.iter().enumerate().all(|(i, &p)| i == p) {
            let j = rng.random_range(1..tasks);
            perm.swap(0, j);
        }
    }
    perm
}

/// Same tasks (with their own test sets) in the order given by `order_seed`.
pub fn task_order_permutations(stream: &TaskStream, order_seed: u64) -> TaskStream {
    let perm = order_permutation(stream.len(), order_seed);
    TaskStream {
        tasks: perm.iter().map(|&i| stream.tasks[i].clone()).collect(),
        classes: stream.classes,
        bases: stream.bases.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(overlap: f64) -> StreamSpec {
        StreamSpec { n_train: 101, n_val: 10, n_test: 50, overlap, seed: 5, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_stream(&small(0.3)).unwrap();
        let b = generate_stream(&small(0.3)).unwrap();
        assert_eq!(a, b);
        let c = generate_stream(&StreamSpec { seed: 6, ..small(0.3) }).unwrap();
        assert_ne!(a.tasks[0].train, c.tasks[0].train);
    }

    #[test]
    fn balanced_labels() {
        let s = generate_stream(&small(0.3)).unwrap();
        for t in &s.tasks {
            for d in [&t.train, &t.test] {
                let h = d.class_histogram(4);
                let (lo, hi) = (h.iter().min().unwrap(), h.iter().max().unwrap());
                assert!(hi - lo <= 1, "{h:?}");
            }
        }
    }

    #[test]
    fn bases_are_orthonormal() {
        for overlap in [0.0, 0.3, 1.0] {
            let s = generate_stream(&small(overlap)).unwrap();
            let mut all = s.bases.shared.clone();
            for p in &s.bases.private {
                all.extend(p.iter().cloned());
            }
            for (i, u) in all.iter().enumerate() {
                for (j, v) in all.iter().enumerate() {
                    let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn subspace_split_follows_overlap() {
        assert_eq!(generate_stream(&small(1.0)).unwrap().bases.private[0].len(), 0);
        assert_eq!(generate_stream(&small(0.0)).unwrap().bases.shared.len(), 0);
        let s = small(0.3);
        assert_eq!((s.shared_dims(), s.private_dims()), (2, 6));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_stream(&StreamSpec { tasks: 0, ..small(0.3) }).is_err());
        assert!(generate_stream(&StreamSpec { overlap: 1.5, ..small(0.3) }).is_err());
        assert!(generate_stream(&StreamSpec { dim: 20, ..small(0.0) }).is_err());
    }

    #[test]
    fn permutations() {
        let s = generate_stream(&small(0.3)).unwrap();
        assert_eq!(task_order_permutations(&s, 0), s);
        for seed in 1..20 {
            let mut p = order_permutation(5, seed);
            assert_ne!(p, vec![0, 1, 2, 3, 4]);
            p.sort();
            assert_eq!(p, vec![0, 1, 2, 3, 4]);
        }
        let q = task_order_permutations(&s, 3);
        let perm = order_permutation(5, 3);
        for (pos, &id) in perm.iter().enumerate() {
            assert_eq!(q.tasks[pos].identity, id);
            assert_eq!(q.tasks[pos].test, s.tasks[id].test);
        }
    }

    #[test]
    fn csv_dump_shape() {
        let d = Dataset::new(2, vec![1.0, 2.0, 3.0, 4.0], vec![0, 1]).unwrap();
        let csv = d.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x0,x1,label");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].ends_with(",1"));
    }
}
