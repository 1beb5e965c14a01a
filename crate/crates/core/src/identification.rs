//! Importance-aware knowledge identification.
//!
//! During fine-tuning every trainable parameter gets a sensitivity per
//! iteration (first-order `|w·g|` or the Fisher-corrected second-order
//! variant). Sensitivities are smoothed over the trajectory into `Ī` and an
//! uncertainty `Ū`; their product is the parameter score, and the mean score
//! over a skill unit's coordinates is the unit's importance. Across tasks the
//! min-max normalized importances are blended with factor `β`.

use rand::seq::index::sample;
use rand::seq::SliceRandom;

use crate::bench::Dataset;
use crate::error::{Error, Result};
use crate::lora::{Model, OrthConvention};
use crate::rng::{fork, Rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{per_sample_gradients, GradTape, Gradients};
use crate::units::{flatten_params, Granularity, Partition, SkillUnitId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SensitivityMetric {
    FirstOrder,
    #[default]
    SecondOrder,
}

/// How the squared per-sample terms of the second-order metric are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FisherReduction {
    #[default]
    Mean,
    Sum,
}

pub fn sensitivity_first_order<T: Scalar>(w: T, g: T) -> T {
    (w * g).abs()
}

/// `|g·w − ½·R_j (g_j·w)²|` with `R` the mean (or sum) over samples.
pub fn sensitivity_second_order<T: Scalar>(w: T, g_mean: T, g_samples: &[T], reduction: FisherReduction) -> Result<T> {
    if g_samples.is_empty() {
        return Err(Error::Empty("per-sample gradients"));
    }
    let sq: T = g_samples.iter().map(|&g| (g * w) * (g * w)).sum();
    let fisher = match reduction {
        FisherReduction::Mean => sq / T::of(g_samples.len() as f64),
        FisherReduction::Sum => sq,
    };
    Ok((g_mean * w - T::half() * fisher).abs())
}

/// Per-parameter smoothed sensitivity `Ī` and uncertainty `Ū`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityState<T> {
    i_bar: Vec<T>,
    u_bar: Vec<T>,
    t: usize,
    alpha1: T,
    alpha2: T,
}

impl<T: Scalar> SensitivityState<T> {
    pub fn new(params: usize, alpha1: T, alpha2: T) -> Result<Self> {
        for (name, a) in [("alpha1", alpha1), ("alpha2", alpha2)] {
            if !(a >= T::zero() && a <= T::one()) {
                return Err(Error::InvalidParameter { name, reason: format!("{a} not in [0, 1]") });
            }
        }
        Ok(Self { i_bar: vec![T::zero(); params], u_bar: vec![T::zero(); params], t: 0, alpha1, alpha2 })
    }

    pub fn i_bar(&self) -> &[T] {
        &self.i_bar
    }

    pub fn u_bar(&self) -> &[T] {
        &self.u_bar
    }

    pub fn iterations(&self) -> usize {
        self.t
    }

    pub fn reset(&mut self) {
        self.i_bar.iter_mut().for_each(|v| *v = T::zero());
        self.u_bar.iter_mut().for_each(|v| *v = T::zero());
        self.t = 0;
    }

    /// One smoothing step. `Ū` uses the freshly updated `Ī`.
    pub fn ema_update(&mut self, sensitivity: &[T]) -> Result<()> {
        if sensitivity.len() != self.i_bar.len() {
            return Err(Error::LengthMismatch { left: self.i_bar.len(), right: sensitivity.len() });
        }
        if let Some(bad) = sensitivity.iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
            return Err(Error::InvalidParameter { name: "sensitivity", reason: format!("{bad} is not finite and nonnegative") });
        }
        let (a1, a2) = (self.alpha1, self.alpha2);
        for ((ib, ub), &s) in self.i_bar.iter_mut().zip(self.u_bar.iter_mut()).zip(sensitivity) {
            *ib = a1 * *ib + (T::one() - a1) * s;
            *ub = a2 * *ub + (T::one() - a2) * (s - *ib).abs();
        }
        self.t += 1;
        Ok(())
    }

    /// `s = Ī·Ū` per parameter.
    pub fn param_scores(&self) -> Result<Vec<T>> {
        if self.t == 0 {
            return Err(Error::NoTrajectory);
        }
        Ok(self.i_bar.iter().zip(&self.u_bar).map(|(&i, &u)| i * u).collect())
    }
}

/// Importance per skill unit of one partition.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitScores<T> {
    pub task_id: usize,
    units: Vec<SkillUnitId>,
    scores: Vec<T>,
}

impl<T: Scalar> UnitScores<T> {
    pub fn new(task_id: usize, units: Vec<SkillUnitId>, scores: Vec<T>) -> Result<Self> {
        if units.len() != scores.len() {
            return Err(Error::LengthMismatch { left: units.len(), right: scores.len() });
        }
        Ok(Self { task_id, units, scores })
    }

    pub fn units(&self) -> &[SkillUnitId] {
        &self.units
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, id: SkillUnitId) -> Option<T> {
        self.units.iter().position(|&u| u == id).map(|i| self.scores[i])
    }

    fn check_same_units(&self, other: &Self) -> Result<()> {
        if self.units != other.units {
            return Err(Error::PartitionMismatch(format!(
                "{} units vs {} units or different ids",
                self.units.len(),
                other.units.len()
            )));
        }
        Ok(())
    }

    pub fn check_partition(&self, partition: &Partition) -> Result<()> {
        if self.units.as_slice() != partition.units() {
            return Err(Error::PartitionMismatch("scores do not match the partition's units".into()));
        }
        Ok(())
    }
}

/// Mean parameter score over each unit's coordinates.
pub fn unit_importance<T: Scalar>(partition: &Partition, param_scores: &[T], task_id: usize) -> Result<UnitScores<T>> {
    if param_scores.len() != partition.coordinate_count() {
        return Err(Error::LengthMismatch { left: partition.coordinate_count(), right: param_scores.len() });
    }
    let scores = (0..partition.len())
        .map(|u| {
            let idx = partition.flat_indices(u);
            idx.iter().map(|&i| param_scores[i]).sum::<T>() / T::of(idx.len() as f64)
        })
        .collect();
    UnitScores::new(task_id, partition.units().to_vec(), scores)
}

/// `(x − min)/(max − min)`; every score becomes 0.5 when all are equal.
pub fn minmax_norm<T: Scalar>(scores: &UnitScores<T>) -> UnitScores<T> {
    let min = scores.scores.iter().copied().fold(T::infinity(), T::min);
    let max = scores.scores.iter().copied().fold(T::neg_infinity(), T::max);
    let range = max - min;
    let normed = scores
        .scores
        .iter()
        .map(|&x| if range > T::zero() { ((x - min) / range).max(T::zero()).min(T::one()) } else { T::half() })
        .collect();
    UnitScores { task_id: scores.task_id, units: scores.units.clone(), scores: normed }
}

/// Accumulated importance over the tasks seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeScores<T> {
    scores: UnitScores<T>,
    tasks: usize,
}

impl<T: Scalar> CumulativeScores<T> {
    /// The first task's raw scores seed the accumulation.
    pub fn from_first(first: UnitScores<T>) -> Self {
        Self { scores: first, tasks: 1 }
    }

    pub fn scores(&self) -> &UnitScores<T> {
        &self.scores
    }

    pub fn tasks_seen(&self) -> usize {
        self.tasks
    }

    pub fn normalized(&self) -> UnitScores<T> {
        minmax_norm(&self.scores)
    }
}

/// `β·Norm(prev) + (1 − β)·Norm(cur)` per unit.
pub fn accumulate_scores<T: Scalar>(prev: &CumulativeScores<T>, cur: &UnitScores<T>, beta: T) -> Result<CumulativeScores<T>> {
    if !(beta >= T::zero() && beta <= T::one()) {
        return Err(Error::InvalidParameter { name: "beta", reason: format!("{beta} not in [0, 1]") });
    }
    prev.scores.check_same_units(cur)?;
    let p = minmax_norm(&prev.scores);
    let c = minmax_norm(cur);
    let scores = p
        .scores
        .iter()
        .zip(&c.scores)
        .map(|(&x, &y)| (beta * x + (T::one() - beta) * y).max(T::zero()).min(T::one()))
        .collect();
    Ok(CumulativeScores {
        scores: UnitScores { task_id: cur.task_id, units: cur.units.clone(), scores },
        tasks: prev.tasks + 1,
    })
}

/// Fine-tuning and identification settings for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub metric: SensitivityMetric,
    pub fisher_batch: usize,
    pub fisher_reduction: FisherReduction,
    pub alpha1: f64,
    pub alpha2: f64,
    pub granularity: Granularity,
    /// Coefficient of the orthogonality penalty, applied at rank-1 granularity.
    pub orth_coef: f64,
    pub orth_convention: OrthConvention,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            epochs: 10,
            batch: 32,
            metric: SensitivityMetric::SecondOrder,
            fisher_batch: 16,
            fisher_reduction: FisherReduction::Mean,
            alpha1: 0.85,
            alpha2: 0.85,
            granularity: Granularity::LoraRank1,
            orth_coef: 0.001,
            orth_convention: OrthConvention::Literal,
        }
    }
}

impl TrainConfig {
    pub fn iterations(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch.max(1))
    }
}

/// Result of fine-tuning on one task.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    /// Unit importances, when identification was requested.
    pub scores: Option<UnitScores<T>>,
    pub iterations: usize,
    pub final_loss: T,
}

/// Per-step callback, invoked with the model after every optimizer update.
pub type StepHook<'a, T> = &'a mut dyn FnMut(&Model<T>);

/// Mini-batch SGD on `data` starting from `model`. When `partition` is
/// given, parameter sensitivities are tracked every iteration and unit
/// importances for `task_id` are returned.
pub fn train_task<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    partition: Option<&Partition>,
    task_id: usize,
    rng: &mut Rng,
    mut hook: Option<StepHook<'_, T>>,
) -> Result<TrainOutcome<T>> {
    if data.is_empty() {
        return Err(Error::Empty("task dataset"));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidParameter { name: "batch/epochs", reason: "must be positive".into() });
    }
    if let Some(p) = partition {
        if !p.fits(model) {
            return Err(Error::PartitionMismatch("partition built for another architecture".into()));
        }
    }
    let mut model = model.clone();
    let lr = T::of(cfg.lr);
    let use_orth = cfg.granularity == Granularity::LoraRank1 && cfg.orth_coef > 0.0;
    let mut state = match partition {
        Some(_) => Some(SensitivityState::new(model.trainable_count(), T::of(cfg.alpha1), T::of(cfg.alpha2))?),
        None => None,
    };
    let n = data.len();
    let mut fisher_rng = fork(rng, Stream::Fisher);
    let mut order: Vec<usize> = (0..n).collect();
    let mut iterations = 0;
    let mut final_loss = T::zero();

    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch) {
            let (x, labels) = data.batch::<T>(chunk);
            let mut tape = GradTape::new();
            let xv = tape.constant(x);
            let logits = model.forward_tape(&mut tape, xv)?;
            let (_, loss) = tape.cross_entropy(logits, &labels)?;
            final_loss = tape.scalar(loss);
            let task_grads = tape.backward(loss)?;

            if let Some(state) = state.as_mut() {
                let sens = match cfg.metric {
                    SensitivityMetric::FirstOrder => first_order_sensitivities(&model, &task_grads),
                    SensitivityMetric::SecondOrder => {
                        let m = cfg.fisher_batch.clamp(1, n);
                        let idx = sample(&mut fisher_rng, n, m).into_vec();
                        second_order_sensitivities(&model, &task_grads, data, &idx, cfg.fisher_reduction)?
                    }
                };
                state.ema_update(&sens)?;
            }

            let mut grads = task_grads;
            if use_orth {
                let mut reg_tape = GradTape::new();
                let reg = model.orth_penalty_tape(&mut reg_tape, T::of(cfg.orth_coef), cfg.orth_convention)?;
                grads.accumulate(&reg_tape.backward(reg)?)?;
            }
            model.sgd_step(&grads, lr)?;
            iterations += 1;
            if let Some(h) = hook.as_mut() {
                h(&model);
            }
        }
    }

    let scores = match (partition, state) {
        (Some(p), Some(state)) => Some(unit_importance(p, &state.param_scores()?, task_id)?),
        _ => None,
    };
    Ok(TrainOutcome { model, scores, iterations, final_loss })
}

/// Fine-tunes on one task and returns the trained model with its unit importances.
pub fn run_identification<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    partition: &Partition,
    cfg: &TrainConfig,
    task_id: usize,
    rng: &mut Rng,
) -> Result<(Model<T>, UnitScores<T>)> {
    let out = train_task(model, data, cfg, Some(partition), task_id, rng, None)?;
    Ok((out.model, out.scores.expect("identification requested")))
}

fn flatten_grads<T: Scalar>(model: &Model<T>, grads: &Gradients<T>) -> Vec<T> {
    model
        .trainable_ids()
        .into_iter()
        .flat_map(|id| grads.get(id).expect("every trainable id has a gradient").as_slice().to_vec())
        .collect()
}

/// `|w·g|` for every trainable coordinate, in flattened order.
pub fn first_order_sensitivities<T: Scalar>(model: &Model<T>, grads: &Gradients<T>) -> Vec<T> {
    let w = flatten_params(model);
    let g = flatten_grads(model, grads);
    w.iter().zip(&g).map(|(&w, &g)| sensitivity_first_order(w, g)).collect()
}

/// Second-order sensitivities using per-sample gradients on the samples `idx`.
pub fn second_order_sensitivities<T: Scalar>(
    model: &Model<T>,
    mean_grads: &Gradients<T>,
    data: &Dataset,
    idx: &[usize],
    reduction: FisherReduction,
) -> Result<Vec<T>> {
    let (x, labels) = data.batch::<T>(idx);
    let mut tape = GradTape::new();
    let xv = tape.constant(x);
    let logits = model.forward_tape(&mut tape, xv)?;
    let (per_sample, _) = tape.cross_entropy(logits, &labels)?;
    let samples: Vec<Vec<T>> = per_sample_gradients(&tape, per_sample)?
        .iter()
        .map(|g| flatten_grads(model, g))
        .collect();
    let w = flatten_params(model);
    let g = flatten_grads(model, mean_grads);
    let mut column = vec![T::zero(); samples.len()];
    w.iter()
        .zip(&g)
        .enumerate()
        .map(|(k, (&w, &g))| {
            for (c, s) in column.iter_mut().zip(&samples) {
                *c = s[k];
            }
            sensitivity_second_order(w, g, &column, reduction)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::UnitKind;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<SkillUnitId> {
        (0..n).map(|i| SkillUnitId { layer: 0, kind: UnitKind::Rank1, component: i }).collect()
    }

    fn scores(v: &[f64]) -> UnitScores<f64> {
        UnitScores::new(1, ids(v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn first_order_values() {
        assert_eq!(sensitivity_first_order(0.0, 5.0), 0.0);
        assert_eq!(sensitivity_first_order(2.0, -3.0), 6.0);
        assert_eq!(sensitivity_first_order(-2.0, 3.0), sensitivity_first_order(2.0, -3.0));
    }

    #[test]
    fn second_order_values() {
        let v: f64 = sensitivity_second_order(1.0, 0.3, &[0.2, 0.4], FisherReduction::Mean).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        let s: f64 = sensitivity_second_order(1.0, 0.3, &[0.2, 0.4], FisherReduction::Sum).unwrap();
        assert!((s - 0.2).abs() < 1e-15);
        assert_eq!(sensitivity_second_order(0.0, 0.3, &[0.2], FisherReduction::Mean).unwrap(), 0.0);
        assert_eq!(sensitivity_second_order(1.0, 0.0, &[0.0, 0.0], FisherReduction::Mean).unwrap(), 0.0);
        assert!(sensitivity_second_order::<f64>(1.0, 0.3, &[], FisherReduction::Mean).is_err());
        // zero Fisher term recovers the first-order metric
        assert_eq!(sensitivity_second_order(-1.5, 0.4, &[0.0], FisherReduction::Mean).unwrap(), sensitivity_first_order(-1.5, 0.4));
    }

    #[test]
    fn ema_hand_recursion() {
        let mut s = SensitivityState::<f64>::new(1, 0.85, 0.85).unwrap();
        assert_eq!(s.param_scores(), Err(Error::NoTrajectory));
        s.ema_update(&[1.0]).unwrap();
        assert!((s.i_bar()[0] - 0.15).abs() < 1e-15);
        assert!((s.u_bar()[0] - 0.1275).abs() < 1e-15);
        assert!((s.param_scores().unwrap()[0] - 0.019125).abs() < 1e-15);
        s.ema_update(&[1.0]).unwrap();
        assert!((s.i_bar()[0] - 0.2775).abs() < 1e-15);
        assert_eq!(s.iterations(), 2);
        s.reset();
        assert_eq!(s.iterations(), 0);
        assert_eq!(s.i_bar()[0], 0.0);
    }

    #[test]
    fn ema_without_smoothing_tracks_input() {
        let mut s = SensitivityState::new(2, 0.0, 0.5).unwrap();
        s.ema_update(&[3.0, 1.0]).unwrap();
        s.ema_update(&[0.5, 2.0]).unwrap();
        assert_eq!(s.i_bar(), &[0.5, 2.0]);
    }

    #[test]
    fn ema_converges_monotonically_to_constant() {
        let mut s = SensitivityState::<f64>::new(1, 0.85, 0.85).unwrap();
        let mut last = 0.0f64;
        for _ in 0..400 {
            s.ema_update(&[2.5]).unwrap();
            assert!(s.i_bar()[0] >= last);
            last = s.i_bar()[0];
        }
        assert!((last - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ema_rejects_bad_input() {
        let mut s = SensitivityState::new(2, 0.85, 0.85).unwrap();
        assert!(s.ema_update(&[1.0]).is_err());
        assert!(s.ema_update(&[1.0, -1.0]).is_err());
        assert!(s.ema_update(&[1.0, f64::NAN]).is_err());
        assert!(SensitivityState::<f64>::new(2, 1.5, 0.5).is_err());
    }

    #[test]
    fn minmax_cases() {
        assert_eq!(minmax_norm(&scores(&[2.0, 4.0, 6.0])).scores(), &[0.0, 0.5, 1.0]);
        assert_eq!(minmax_norm(&scores(&[3.0, 3.0, 3.0])).scores(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn accumulate_cases() {
        let prev = CumulativeScores::from_first(scores(&[0.0, 1.0]));
        let cur = scores(&[1.0, 0.0]);
        let acc = accumulate_scores(&prev, &cur, 0.7).unwrap();
        assert!((acc.scores().scores()[0] - 0.3).abs() < 1e-15);
        assert!((acc.scores().scores()[1] - 0.7).abs() < 1e-15);
        assert_eq!(acc.tasks_seen(), 2);
        assert_eq!(accumulate_scores(&prev, &cur, 1.0).unwrap().scores().scores(), &[0.0, 1.0]);
        assert_eq!(accumulate_scores(&prev, &cur, 0.0).unwrap().scores().scores(), &[1.0, 0.0]);
        assert!(accumulate_scores(&prev, &scores(&[1.0, 0.0, 2.0]), 0.5).is_err());
        assert!(accumulate_scores(&prev, &cur, 1.2).is_err());
    }

    #[test]
    fn unit_mean_cases() {
        let p = {
            use crate::lora::{Model, ModelSpec};
            use crate::rng::{substream, Stream};
            let spec = ModelSpec { input_dim: 3, hidden: vec![], classes: 3, rank: 1, head_rank: 1, ..Default::default() };
            let m: Model<f64> = Model::new(&spec, &mut substream(0, Stream::Init)).unwrap();
            Partition::new(&m, Granularity::MatrixLevel)
        };
        // A is 1x3, B is 3x1
        let s = unit_importance(&p, &[1.0, 3.0, 2.0, 4.0, 4.0, 4.0], 1).unwrap();
        assert_eq!(s.scores(), &[2.0, 4.0]);
        let scaled = unit_importance(&p, &[2.0, 6.0, 4.0, 8.0, 8.0, 8.0], 1).unwrap();
        assert_eq!(scaled.scores(), &[4.0, 8.0]);
        assert!(unit_importance(&p, &[1.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn ema_stays_bounded(inputs in proptest::collection::vec(proptest::collection::vec(0.0f64..5.0, 3), 1..50),
                             a1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0) {
            let mut s = SensitivityState::new(3, a1, a2).unwrap();
            for x in &inputs {
                s.ema_update(x).unwrap();
                for k in 0..3 {
                    prop_assert!(s.i_bar()[k] >= 0.0 && s.i_bar()[k] <= 5.0);
                    prop_assert!(s.u_bar()[k] >= 0.0 && s.u_bar()[k] <= 5.0);
                }
            }
            prop_assert!(s.param_scores().unwrap().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn accumulate_stays_in_unit_interval(prev in proptest::collection::vec(-10.0f64..10.0, 2..12),
                                             seed in 0u64..1000, beta in 0.0f64..=1.0) {
            let n = prev.len();
            let cur: Vec<f64> = (0..n).map(|i| ((i as u64 * 7919 + seed) % 101) as f64 * 0.3).collect();
            let acc = accumulate_scores(&CumulativeScores::from_first(scores(&prev)), &scores(&cur), beta).unwrap();
            prop_assert!(acc.scores().scores().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let norm = minmax_norm(&scores(&prev));
            prop_assert!(norm.scores().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
