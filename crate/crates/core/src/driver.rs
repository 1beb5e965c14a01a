//! Sequential-task orchestration: KIF with and without memory replay, the
//! sequential fine-tuning and replay baselines, and the coarse-grained
//! averaging ablations.
//!
//! Every task trains from the model the previous task ended with (the fused
//! model for fusion strategies). After each task the persisted model is
//! evaluated on every task's test set, filling one row of the
//! [`EvalMatrix`].

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;

use crate::bench::{Dataset, TaskStream};
use crate::error::{Error, Result};
use crate::fusion::{ema_average_step, fuse_models, FusionPolicy, FusionReport, FusionStrategy};
use crate::identification::{
    accumulate_scores, minmax_norm, train_task, CumulativeScores, TrainConfig, UnitScores,
};
use crate::lora::{Model, ModelSpec};
use crate::metrics::EvalMatrix;
use crate::rng::{indexed_substream, substream, Stream};
use crate::scalar::Scalar;
use crate::units::Partition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    KifStatic,
    KifAdaptive,
    KifM,
    KifLoraM,
    Seq,
    ReplayOnly,
    Coarse,
    Ema,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::KifStatic,
        Strategy::KifAdaptive,
        Strategy::KifM,
        Strategy::KifLoraM,
        Strategy::Seq,
        Strategy::ReplayOnly,
        Strategy::Coarse,
        Strategy::Ema,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::KifStatic => "kif_static",
            Strategy::KifAdaptive => "kif_adaptive",
            Strategy::KifM => "kif_m",
            Strategy::KifLoraM => "kiflora_m",
            Strategy::Seq => "seq",
            Strategy::ReplayOnly => "replay_only",
            Strategy::Coarse => "coarse",
            Strategy::Ema => "ema",
        }
    }

    /// Whether unit importances are identified during training.
    pub fn identifies(self) -> bool {
        matches!(self, Strategy::KifStatic | Strategy::KifAdaptive | Strategy::KifM | Strategy::KifLoraM)
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Strategy::KifM | Strategy::KifLoraM | Strategy::ReplayOnly)
    }

    pub fn fusion(self) -> Option<FusionStrategy> {
        match self {
            Strategy::KifStatic | Strategy::KifM => Some(FusionStrategy::StaticWeighted),
            Strategy::KifAdaptive | Strategy::KifLoraM => Some(FusionStrategy::AdaptiveWeighted),
            Strategy::Coarse => Some(FusionStrategy::CoarseAverage),
            Strategy::Ema => Some(FusionStrategy::EmaAverage),
            Strategy::Seq | Strategy::ReplayOnly => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidParameter { name: "strategy", reason: format!("unknown strategy `{s}`") })
    }
}

/// Everything one continual-learning run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinualConfig {
    pub strategy: Strategy,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Fusion hyperparameters; the strategy field is derived from `strategy`.
    pub fusion: FusionPolicy,
    pub beta: f64,
    pub memory_fraction: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::KifAdaptive,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            fusion: FusionPolicy::new(FusionStrategy::AdaptiveWeighted),
            beta: 0.7,
            memory_fraction: 0.02,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

impl ContinualConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidParameter { name: "beta", reason: format!("{} not in [0, 1]", self.beta) });
        }
        if self.strategy.uses_memory() && !(self.memory_fraction > 0.0 && self.memory_fraction <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "memory_fraction",
                reason: format!("{} not in (0, 1]", self.memory_fraction),
            });
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidParameter { name: "ema_decay", reason: format!("{} not in [0, 1]", self.ema_decay) });
        }
        Ok(())
    }
}

/// Importances recorded for one task (position `task`, 1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskScores<T> {
    pub task: usize,
    pub raw: UnitScores<T>,
    pub normalized: UnitScores<T>,
    /// Accumulated scores after this task (raw for the first task).
    pub cumulative: UnitScores<T>,
}

/// Models around one task: the warm start, the trained model, and the
/// model that persists into the next task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSnapshot<T> {
    pub start: Model<T>,
    pub trained: Model<T>,
    pub persisted: Model<T>,
}

#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub strategy: Strategy,
    pub model: Model<T>,
    pub eval: EvalMatrix<T>,
    pub scores: Vec<TaskScores<T>>,
    /// `(task position, report)` for every fusion that took place.
    pub fusion: Vec<(usize, FusionReport<T>)>,
    pub history: Vec<TaskSnapshot<T>>,
    /// Replay memory sizes per task, in task order (empty without replay).
    pub memory_sizes: Vec<usize>,
}

/// Test accuracy of `model` on `data`. Never mutates the model.
pub fn accuracy<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<T> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, labels) = data.batch::<T>(chunk);
        let pred = model.predict(&x)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(T::of(correct as f64 / data.len() as f64))
}

/// `⌈m·N⌉` replay samples for a training set of `n`.
pub fn memory_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Uniform subset of `data` without replacement, `⌈fraction·N⌉` samples.
pub fn sample_memory(data: &Dataset, fraction: f64, rng: &mut crate::rng::Rng) -> Dataset {
    let m = memory_size(fraction, data.len()).min(data.len());
    let mut idx = sample(rng, data.len(), m).into_vec();
    idx.sort_unstable();
    data.subset(&idx)
}

/// Runs `cfg.strategy` over the whole stream.
pub fn run_continual<T: Scalar>(stream: &TaskStream, cfg: &ContinualConfig) -> Result<RunOutput<T>> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::Empty("task stream"));
    }
    let k_total = stream.len();
    let mut init_rng = substream(cfg.seed, Stream::Init);
    let mut model_spec = cfg.model.clone();
    model_spec.input_dim = stream.dim();
    model_spec.classes = stream.classes;
    let base: Model<T> = Model::new(&model_spec, &mut init_rng)?;
    let partition = Partition::new(&base, cfg.train.granularity);
    let mut policy = cfg.fusion.clone();
    if let Some(f) = cfg.strategy.fusion() {
        policy.strategy = f;
    }

    let mut persisted = base;
    let mut cumulative: Option<CumulativeScores<T>> = None;
    let mut memory: Vec<Dataset> = Vec::new();
    let mut out = RunOutput {
        strategy: cfg.strategy,
        model: persisted.clone(),
        eval: EvalMatrix::new(k_total),
        scores: Vec::new(),
        fusion: Vec::new(),
        history: Vec::new(),
        memory_sizes: Vec::new(),
    };

    for (k, task) in stream.tasks.iter().enumerate() {
        let position = k + 1;
        let mut pool = task.train.clone();
        if cfg.strategy.uses_memory() {
            for m in &memory {
                pool.extend(m)?;
            }
        }
        let mut rng = indexed_substream(cfg.seed, Stream::Batching, k as u64);
        let start = persisted.clone();
        let identify = cfg.strategy.identifies().then_some(&partition);

        let (trained, raw, ema_model) = if cfg.strategy == Strategy::Ema {
            let mut running = start.clone();
            let decay = T::of(cfg.ema_decay);
            let mut failure = None;
            let mut hook = |m: &Model<T>| {
                if let Err(e) = ema_average_step(&mut running, m, decay) {
                    failure.get_or_insert(e);
                }
            };
            let outcome = train_task(&start, &pool, &cfg.train, identify, position, &mut rng, Some(&mut hook))?;
            if let Some(e) = failure {
                return Err(e);
            }
            (outcome.model, outcome.scores, Some(running))
        } else {
            let outcome = train_task(&start, &pool, &cfg.train, identify, position, &mut rng, None)?;
            (outcome.model, outcome.scores, None)
        };

        let next = match (cfg.strategy, k) {
            (Strategy::Seq | Strategy::ReplayOnly, _) => trained.clone(),
            (Strategy::Ema, _) => ema_model.expect("ema run keeps a running model"),
            (_, 0) => trained.clone(),
            (Strategy::Coarse, _) => {
                let (fused, report) = fuse_models(&start, &trained, None, None, &partition, &policy)?;
                out.fusion.push((position, report));
                fused
            }
            _ => {
                let cur = raw.as_ref().expect("kif strategies identify");
                let c = cumulative.as_ref().expect("set after the first task");
                let prev = c.normalized();
                let cur_for_fusion = match policy.strategy {
                    FusionStrategy::AdaptiveWeighted => minmax_norm(cur),
                    _ => cur.clone(),
                };
                let (fused, report) = fuse_models(&start, &trained, Some(&prev), Some(&cur_for_fusion), &partition, &policy)?;
                out.fusion.push((position, report));
                fused
            }
        };

        if let Some(raw) = raw {
            let acc = match cumulative.take() {
                None => CumulativeScores::from_first(raw.clone()),
                Some(prev) => accumulate_scores(&prev, &raw, T::of(cfg.beta))?,
            };
            out.scores.push(TaskScores {
                task: position,
                normalized: minmax_norm(&raw),
                cumulative: acc.scores().clone(),
                raw,
            });
            cumulative = Some(acc);
        }

        if cfg.strategy.uses_memory() {
            let mut mem_rng = indexed_substream(cfg.seed, Stream::Memory, task.identity as u64);
            let m = sample_memory(&task.train, cfg.memory_fraction, &mut mem_rng);
            out.memory_sizes.push(m.len());
            memory.push(m);
        }

        for (i, other) in stream.tasks.iter().enumerate() {
            out.eval.set(position, i + 1, accuracy(&next, &other.test)?)?;
        }
        out.history.push(TaskSnapshot { start, trained, persisted: next.clone() });
        persisted = next;
    }
    out.model = persisted;
    Ok(out)
}

fn with_strategy(cfg: &ContinualConfig, allowed: &[Strategy], fallback: Strategy) -> ContinualConfig {
    let mut c = cfg.clone();
    if !allowed.contains(&c.strategy) {
        c.strategy = fallback;
    }
    c
}

/// KIF without replay (static or adaptive fusion per `cfg.strategy`).
pub fn run_kif<T: Scalar>(stream: &TaskStream, cfg: &ContinualConfig) -> Result<RunOutput<T>> {
    run_continual(stream, &with_strategy(cfg, &[Strategy::KifStatic, Strategy::KifAdaptive], Strategy::KifAdaptive))
}

/// KIF with memory replay of past tasks' stored samples.
pub fn run_kif_m<T: Scalar>(stream: &TaskStream, cfg: &ContinualConfig) -> Result<RunOutput<T>> {
    run_continual(stream, &with_strategy(cfg, &[Strategy::KifM, Strategy::KifLoraM], Strategy::KifLoraM))
}

/// Plain sequential LoRA fine-tuning: no identification, no fusion.
pub fn run_baseline_seq<T: Scalar>(stream: &TaskStream, cfg: &ContinualConfig) -> Result<RunOutput<T>> {
    run_continual(stream, &with_strategy(cfg, &[Strategy::Seq], Strategy::Seq))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }

    #[test]
    fn memory_size_rounds_up() {
        assert_eq!(memory_size(0.02, 1000), 20);
        assert_eq!(memory_size(0.02, 1001), 21);
        assert_eq!(memory_size(0.5, 3), 2);
        assert_eq!(memory_size(1.0, 7), 7);
    }

    #[test]
    fn zero_memory_rejected_for_replay() {
        let cfg = ContinualConfig { strategy: Strategy::KifM, memory_fraction: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let seq = ContinualConfig { strategy: Strategy::Seq, memory_fraction: 0.0, ..Default::default() };
        assert!(seq.validate().is_ok());
    }
}
