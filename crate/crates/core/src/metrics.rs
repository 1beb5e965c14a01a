//! Evaluation matrix and the AP / FWT / BWT summaries.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `a[j][i]`: accuracy on task `i`'s test set after training task `j`
/// (both 1-based, `1..=K`).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMatrix<T> {
    k: usize,
    entries: Vec<Option<T>>,
}

impl<T: Scalar> EvalMatrix<T> {
    pub fn new(tasks: usize) -> Self {
        Self { k: tasks, entries: vec![None; tasks * tasks] }
    }

    /// Builds from full rows, `rows[j-1][i-1] = a[j][i]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        let mut m = Self::new(k);
        for (j, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::LengthMismatch { left: k, right: row.len() });
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(j + 1, i + 1, T::of(v))?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.k
    }

    pub fn set(&mut self, after: usize, eval: usize, value: T) -> Result<()> {
        if after == 0 || eval == 0 || after > self.k || eval > self.k {
            return Err(Error::InvalidParameter { name: "eval index", reason: format!("({after}, {eval}) outside 1..={}", self.k) });
        }
        if !(value >= T::zero() && value <= T::one()) {
            return Err(Error::InvalidParameter { name: "accuracy", reason: format!("{value} not in [0, 1]") });
        }
        self.entries[(after - 1) * self.k + eval - 1] = Some(value);
        Ok(())
    }

    pub fn get(&self, after: usize, eval: usize) -> Option<T> {
        if after == 0 || eval == 0 || after > self.k || eval > self.k {
            return None;
        }
        self.entries[(after - 1) * self.k + eval - 1]
    }

    fn need(&self, after: usize, eval: usize) -> Result<T> {
        self.get(after, eval).ok_or(Error::InvalidParameter {
            name: "eval matrix",
            reason: format!("entry a[{after}][{eval}] missing"),
        })
    }

    /// All present entries as `(after, eval, accuracy)`, row-major.
    pub fn entries(&self) -> Vec<(usize, usize, T)> {
        let mut out = Vec::new();
        for j in 1..=self.k {
            for i in 1..=self.k {
                if let Some(v) = self.get(j, i) {
                    out.push((j, i, v));
                }
            }
        }
        out
    }
}

/// Average final performance: `(1/K) Σᵢ a[K][i]`.
pub fn metric_ap<T: Scalar>(e: &EvalMatrix<T>) -> Result<T> {
    let k = e.tasks();
    if k == 0 {
        return Err(Error::Empty("eval matrix"));
    }
    let mut sum = T::zero();
    for i in 1..=k {
        sum = sum + e.need(k, i)?;
    }
    Ok(sum / T::of(k as f64))
}

/// Mean zero-shot performance on each next task: `(1/(K−1)) Σ_{i≥2} a[i−1][i]`.
pub fn metric_fwt<T: Scalar>(e: &EvalMatrix<T>) -> Result<T> {
    let k = e.tasks();
    if k < 2 {
        return Err(Error::InvalidParameter { name: "tasks", reason: "FWT needs at least two tasks".into() });
    }
    let mut sum = T::zero();
    for i in 2..=k {
        sum = sum + e.need(i - 1, i)?;
    }
    Ok(sum / T::of((k - 1) as f64))
}

/// Mean change on earlier tasks: `(1/(K−1)) Σ_{i<K} (a[K][i] − a[i][i])`.
pub fn metric_bwt<T: Scalar>(e: &EvalMatrix<T>) -> Result<T> {
    let k = e.tasks();
    if k < 2 {
        return Err(Error::InvalidParameter { name: "tasks", reason: "BWT needs at least two tasks".into() });
    }
    let mut sum = T::zero();
    for i in 1..k {
        sum = sum + e.need(k, i)? - e.need(i, i)?;
    }
    Ok(sum / T::of((k - 1) as f64))
}
