//! Unit-wise knowledge fusion of the accumulated model with the newly
//! trained one, plus the coarse-grained averaging baselines.
//!
//! Rank-1 units are fused on their factor entries `(aᵢ, bᵢ)`, so the fused
//! model is still a LoRA factorization. The fused rank-one product is in
//! general not the weighted average of the two products.

use std::fmt;

use crate::error::{Error, Result};
use crate::identification::UnitScores;
use crate::lora::Model;
use crate::scalar::Scalar;
use crate::units::{Partition, SkillUnitId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionStrategy {
    StaticWeighted,
    AdaptiveWeighted,
    CoarseAverage,
    EmaAverage,
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::StaticWeighted => "static",
            FusionStrategy::AdaptiveWeighted => "adaptive",
            FusionStrategy::CoarseAverage => "coarse",
            FusionStrategy::EmaAverage => "ema",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionPolicy {
    pub strategy: FusionStrategy,
    /// Weight of the previous model when both sides of a unit are important.
    pub gamma: f64,
    /// Softmax temperature of the adaptive weights.
    pub tau: f64,
    /// Weight of the previous model in coarse averaging.
    pub lambda: f64,
    /// Units strictly above this empirical quantile of scores are important.
    pub quantile: f64,
}

impl FusionPolicy {
    pub fn new(strategy: FusionStrategy) -> Self {
        Self { strategy, gamma: 0.5, tau: 0.15, lambda: 0.5, quantile: 0.8 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::InvalidParameter { name, reason });
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", format!("{} not in [0, 1]", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", format!("{} must be positive", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", format!("{} not in [0, 1]", self.lambda));
        }
        if !(self.quantile >= 0.0 && self.quantile < 1.0) {
            return bad("quantile", format!("{} not in [0, 1)", self.quantile));
        }
        Ok(())
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn empirical_quantile<T: Scalar>(values: &[T], q: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Empty("quantile input"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::of(pos - lo as f64);
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// `true` for units whose score strictly exceeds the `quantile` threshold.
pub fn importance_flags<T: Scalar>(scores: &UnitScores<T>, quantile: f64) -> Result<Vec<bool>> {
    let delta = empirical_quantile(scores.scores(), quantile)?;
    Ok(scores.scores().iter().map(|&s| s > delta).collect())
}

/// Which branch of the threshold rule a unit took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseLabel {
    BothImportant,
    PrevOnly,
    CurOnly,
    Neither,
    Adaptive,
    Global,
    Running,
}

impl CaseLabel {
    pub fn from_flags(prev: bool, cur: bool) -> Self {
        match (prev, cur) {
            (true, true) => CaseLabel::BothImportant,
            (true, false) => CaseLabel::PrevOnly,
            (false, true) => CaseLabel::CurOnly,
            (false, false) => CaseLabel::Neither,
        }
    }
}

impl fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaseLabel::BothImportant => "prev+cur+",
            CaseLabel::PrevOnly => "prev+cur-",
            CaseLabel::CurOnly => "prev-cur+",
            CaseLabel::Neither => "prev-cur-",
            CaseLabel::Adaptive => "adaptive",
            CaseLabel::Global => "global",
            CaseLabel::Running => "running",
        })
    }
}

/// Convex combination `w_prev·prev + (1 − w_prev)·cur`, exact at the
/// endpoints and clamped to the segment between the two values.
fn convex<T: Scalar>(prev: &[T], cur: &[T], w_prev: T) -> Result<Vec<T>> {
    if prev.len() != cur.len() {
        return Err(Error::LengthMismatch { left: prev.len(), right: cur.len() });
    }
    if w_prev >= T::one() {
        return Ok(prev.to_vec());
    }
    if w_prev <= T::zero() {
        return Ok(cur.to_vec());
    }
    Ok(prev
        .iter()
        .zip(cur)
        .map(|(&p, &c)| (c + w_prev * (p - c)).max(p.min(c)).min(p.max(c)))
        .collect())
}

/// Weight of the previous side under the threshold rule.
pub fn static_weight<T: Scalar>(prev_flag: bool, cur_flag: bool, gamma: T) -> T {
    match (prev_flag, cur_flag) {
        (true, true) => gamma,
        (true, false) => T::one(),
        (false, true) => T::zero(),
        (false, false) => T::half(),
    }
}

pub fn static_fuse_unit<T: Scalar>(prev: &[T], cur: &[T], prev_flag: bool, cur_flag: bool, gamma: T) -> Result<Vec<T>> {
    convex(prev, cur, static_weight(prev_flag, cur_flag, gamma))
}

/// Temperature softmax over the two importances, max-shifted.
pub fn adaptive_weights<T: Scalar>(i_prev: T, i_cur: T, tau: T) -> (T, T) {
    let m = i_prev.max(i_cur);
    let ep = ((i_prev - m) / tau).exp();
    let ec = ((i_cur - m) / tau).exp();
    let w_prev = ep / (ep + ec);
    (w_prev, T::one() - w_prev)
}

pub fn adaptive_fuse_unit<T: Scalar>(prev: &[T], cur: &[T], i_prev: T, i_cur: T, tau: T) -> Result<Vec<T>> {
    if tau.is_nan() || tau <= T::zero() {
        return Err(Error::InvalidParameter { name: "tau", reason: format!("{tau} must be positive") });
    }
    convex(prev, cur, adaptive_weights(i_prev, i_cur, tau).0)
}

/// How one unit was fused.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitFusion<T> {
    pub unit: SkillUnitId,
    pub w_prev: T,
    pub w_cur: T,
    pub case: CaseLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport<T> {
    pub strategy: FusionStrategy,
    pub units: Vec<UnitFusion<T>>,
}

/// Fuses `f_prev` (the accumulated model) with `f_cur` (just trained).
///
/// Static fusion flags the previous side from `prev_scores` (cumulative) and
/// the current side from `cur_scores`; adaptive fusion feeds both into the
/// softmax weights. Coarse averaging and EMA ignore the scores.
pub fn fuse_models<T: Scalar>(
    f_prev: &Model<T>,
    f_cur: &Model<T>,
    prev_scores: Option<&UnitScores<T>>,
    cur_scores: Option<&UnitScores<T>>,
    partition: &Partition,
    policy: &FusionPolicy,
) -> Result<(Model<T>, FusionReport<T>)> {
    policy.validate()?;
    f_prev.check_architecture(f_cur)?;
    if !partition.fits(f_prev) {
        return Err(Error::ArchitectureMismatch("partition built for another architecture".into()));
    }
    let scored = |s: Option<&UnitScores<T>>| -> Result<UnitScores<T>> {
        let s = s.ok_or(Error::Empty("importance scores"))?;
        s.check_partition(partition)?;
        Ok(s.clone())
    };

    let weights: Vec<(T, CaseLabel)> = match policy.strategy {
        FusionStrategy::StaticWeighted => {
            let prev = importance_flags(&scored(prev_scores)?, policy.quantile)?;
            let cur = importance_flags(&scored(cur_scores)?, policy.quantile)?;
            prev.iter()
                .zip(&cur)
                .map(|(&p, &c)| (static_weight(p, c, T::of(policy.gamma)), CaseLabel::from_flags(p, c)))
                .collect()
        }
        FusionStrategy::AdaptiveWeighted => {
            let prev = scored(prev_scores)?;
            let cur = scored(cur_scores)?;
            let tau = T::of(policy.tau);
            prev.scores()
                .iter()
                .zip(cur.scores())
                .map(|(&p, &c)| (adaptive_weights(p, c, tau).0, CaseLabel::Adaptive))
                .collect()
        }
        FusionStrategy::CoarseAverage => vec![(T::of(policy.lambda), CaseLabel::Global); partition.len()],
        FusionStrategy::EmaAverage => vec![(T::zero(), CaseLabel::Running); partition.len()],
    };

    let mut fused = f_cur.clone();
    let mut report = FusionReport { strategy: policy.strategy, units: Vec::with_capacity(partition.len()) };
    for (u, &(w_prev, case)) in weights.iter().enumerate() {
        let prev = partition.values_at(u, f_prev);
        let cur = partition.values_at(u, f_cur);
        partition.write_at(u, &mut fused, &convex(&prev, &cur, w_prev)?)?;
        report.units.push(UnitFusion { unit: partition.units()[u], w_prev, w_cur: T::one() - w_prev, case });
    }
    Ok((fused, report))
}

/// `θ_running ← decay·θ_running + (1 − decay)·θ_cur` over trainable parameters.
pub fn ema_average_step<T: Scalar>(running: &mut Model<T>, cur: &Model<T>, decay: T) -> Result<()> {
    if !(decay >= T::zero() && decay <= T::one()) {
        return Err(Error::InvalidParameter { name: "decay", reason: format!("{decay} not in [0, 1]") });
    }
    running.check_architecture(cur)?;
    for id in cur.trainable_ids() {
        let c = cur.param(id).expect("same architecture").as_slice();
        let r = running.param_mut(id).expect("same architecture").as_mut_slice();
        let next = convex(r, c, decay)?;
        r.copy_from_slice(&next);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::UnitKind;

    fn scores(v: &[f64]) -> UnitScores<f64> {
        let ids = (0..v.len()).map(|i| SkillUnitId { layer: 0, kind: UnitKind::Rank1, component: i }).collect();
        UnitScores::new(1, ids, v.to_vec()).unwrap()
    }

    #[test]
    fn quantile_flags_top_two_of_ten() {
        let s = scores(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
        let flags = importance_flags(&s, 0.8).unwrap();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 2);
        assert!(flags[8] && flags[9]);
        assert!(importance_flags(&scores(&[0.4; 5]), 0.8).unwrap().iter().all(|&f| !f));
        let zero_q = importance_flags(&scores(&[0.3, 0.1, 0.5, 0.1]), 0.0).unwrap();
        assert_eq!(zero_q, vec![true, false, true, false]);
    }

    #[test]
    fn static_cases() {
        let (p, c) = ([2.0], [4.0]);
        assert_eq!(static_fuse_unit(&p, &c, true, true, 0.5).unwrap(), vec![3.0]);
        assert_eq!(static_fuse_unit(&p, &c, true, false, 0.5).unwrap(), vec![2.0]);
        assert_eq!(static_fuse_unit(&p, &c, false, true, 0.5).unwrap(), vec![4.0]);
        assert_eq!(static_fuse_unit(&p, &c, false, false, 0.5).unwrap(), vec![3.0]);
        assert_eq!(static_fuse_unit(&p, &c, true, true, 1.0).unwrap(), vec![2.0]);
        assert!(static_fuse_unit(&p, &[1.0, 2.0], true, true, 0.5).is_err());
        let same = [1.25, -3.5];
        for (a, b) in [(true, true), (true, false), (false, true), (false, false)] {
            assert_eq!(static_fuse_unit(&same, &same, a, b, 0.3).unwrap(), same.to_vec());
        }
    }

    #[test]
    fn adaptive_weight_values() {
        assert_eq!(adaptive_weights(0.4, 0.4, 0.15), (0.5, 0.5));
        let (wp, wc) = adaptive_weights(0.8, 0.2, 0.15);
        assert!((wp - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-15);
        assert!((wp - 0.98201).abs() < 1e-5);
        assert!((wp + wc - 1.0).abs() < 1e-15);
        let (sp, _) = adaptive_weights(0.8 + 3.7, 0.2 + 3.7, 0.15);
        assert!((sp - wp).abs() < 1e-12);
    }

    #[test]
    fn adaptive_fuse_values() {
        let mid = adaptive_fuse_unit(&[0.0, 2.0], &[1.0, 0.0], 0.3, 0.3, 0.15).unwrap();
        assert_eq!(mid, vec![0.5, 1.0]);
        let out: Vec<f64> = adaptive_fuse_unit(&[0.0, 2.0], &[1.0, 0.0], 0.8, 0.2, 0.15).unwrap();
        assert!((out[0] - 0.01799).abs() < 1e-5 && (out[1] - 1.96402).abs() < 1e-5);
        assert!(adaptive_fuse_unit(&[0.0], &[1.0], 0.8, 0.2, 0.0).is_err());
    }

    #[test]
    fn hard_selection_limit() {
        let prev = [0.3, -1.2, 2.0];
        let cur = [1.1, 0.4, -0.5];
        let out = adaptive_fuse_unit(&prev, &cur, 0.6, 0.5, 1e-4).unwrap();
        let dist = prev.iter().zip(&cur).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        for (o, p) in out.iter().zip(&prev) {
            assert!((o - p).abs() <= 1e-8 * dist);
        }
    }

    #[test]
    fn policy_validation() {
        let mut p = FusionPolicy::new(FusionStrategy::AdaptiveWeighted);
        assert!(p.validate().is_ok());
        p.tau = -1.0;
        assert!(p.validate().is_err());
    }
}
