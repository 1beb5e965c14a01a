//! TOML run configuration with `SKILLFUSE_<SECTION>_<KEY>` environment
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skillfuse::bench::StreamSpec;
use skillfuse::driver::{ContinualConfig, Strategy};
use skillfuse::fusion::{FusionPolicy, FusionStrategy};
use skillfuse::identification::{FisherReduction, SensitivityMetric, TrainConfig};
use skillfuse::lora::{ModelSpec, OrthConvention};
use skillfuse::units::Granularity;

pub const ENV_PREFIX: &str = "SKILLFUSE_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("environment override {var}: {reason}")]
    Env { var: String, reason: String },
    #[error("{key} = {value} violates bound {bound}")]
    Range { key: &'static str, value: String, bound: &'static str },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    KifStatic,
    KifAdaptive,
    KifM,
    KifloraM,
    Seq,
    ReplayOnly,
    Coarse,
    Ema,
}

impl From<StrategyName> for Strategy {
    fn from(s: StrategyName) -> Self {
        match s {
            StrategyName::KifStatic => Strategy::KifStatic,
            StrategyName::KifAdaptive => Strategy::KifAdaptive,
            StrategyName::KifM => Strategy::KifM,
            StrategyName::KifloraM => Strategy::KifLoraM,
            StrategyName::Seq => Strategy::Seq,
            StrategyName::ReplayOnly => Strategy::ReplayOnly,
            StrategyName::Coarse => Strategy::Coarse,
            StrategyName::Ema => Strategy::Ema,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityName {
    Matrix,
    Rank1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    FirstOrder,
    SecondOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionName {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthName {
    Literal,
    GramSmall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub strategies: Vec<StrategyName>,
    pub seeds: Vec<u64>,
    pub orders: Vec<u64>,
    pub output_dir: PathBuf,
    /// Parallel runs; 0 uses every available core.
    pub workers: usize,
    /// Also write each task's train and test sets as CSV.
    pub dump_data: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            strategies: vec![StrategyName::KifAdaptive, StrategyName::Seq],
            seeds: vec![0, 1, 2],
            orders: vec![0, 1],
            output_dir: PathBuf::from("runs"),
            workers: 0,
            dump_data: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub head_rank: usize,
    pub base_gain: f64,
    pub a_init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelSpec::default();
        Self { hidden: m.hidden, rank: m.rank, head_rank: m.head_rank, base_gain: m.base_gain, a_init_std: m.a_init_std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub orth_coef: f64,
    pub orth_convention: OrthName,
    pub memory_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            epochs: t.epochs,
            batch: t.batch,
            orth_coef: t.orth_coef,
            orth_convention: OrthName::Literal,
            memory_fraction: ContinualConfig::default().memory_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentificationSection {
    pub granularity: GranularityName,
    pub metric: MetricName,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub fisher_batch: usize,
    pub fisher_reduction: ReductionName,
}

impl Default for IdentificationSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            granularity: GranularityName::Rank1,
            metric: MetricName::SecondOrder,
            alpha1: t.alpha1,
            alpha2: t.alpha2,
            beta: ContinualConfig::default().beta,
            fisher_batch: t.fisher_batch,
            fisher_reduction: ReductionName::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub tau: f64,
    pub gamma: f64,
    pub quantile: f64,
    pub lambda: f64,
    pub ema_decay: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        let p = FusionPolicy::new(FusionStrategy::AdaptiveWeighted);
        Self { tau: p.tau, gamma: p.gamma, quantile: p.quantile, lambda: p.lambda, ema_decay: ContinualConfig::default().ema_decay }
    }
}

/// Stream shape; the generator seed is the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSection {
    pub tasks: usize,
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub overlap: f64,
    pub noise: f64,
    pub subspace_dim: usize,
    pub separation: f64,
}

impl Default for StreamSection {
    fn default() -> Self {
        let s = StreamSpec::default();
        Self {
            tasks: s.tasks,
            dim: s.dim,
            classes: s.classes,
            n_train: s.n_train,
            n_val: s.n_val,
            n_test: s.n_test,
            overlap: s.overlap,
            noise: s.noise,
            subspace_dim: s.subspace_dim,
            separation: s.separation,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub identification: IdentificationSection,
    pub fusion: FusionSection,
    pub stream: StreamSection,
}

const SECTIONS: [&str; 6] = ["run", "model", "train", "identification", "fusion", "stream"];

/// Reads `path`, applies overrides from the process environment, validates.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config_str(&text, std::env::vars())
}

/// Parses TOML text with explicit `(name, value)` environment pairs.
pub fn parse_config_str<I>(text: &str, env: I) -> Result<RunConfig, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table: toml::Table = text.parse()?;
    let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    overrides.sort();
    for (var, raw) in overrides {
        apply_override(&mut table, &var, &raw)?;
    }
    let cfg: RunConfig = table.try_into()?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, var: &str, raw: &str) -> Result<(), ConfigError> {
    let rest = var[ENV_PREFIX.len()..].to_ascii_lowercase();
    let (section, key) = SECTIONS
        .iter()
        .find_map(|s| rest.strip_prefix(s).and_then(|k| k.strip_prefix('_')).map(|k| (*s, k)))
        .ok_or_else(|| ConfigError::Env { var: var.to_string(), reason: "no such section".into() })?;
    if key.is_empty() {
        return Err(ConfigError::Env { var: var.to_string(), reason: "missing key".into() });
    }
    let value = parse_env_value(raw);
    let entry = table
        .entry(section)
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(ConfigError::Env { var: var.to_string(), reason: format!("`{section}` is not a table") }),
    }
}

/// TOML literal when it parses as one, a bare string otherwise.
fn parse_env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn check(ok: bool, key: &'static str, value: impl ToString, bound: &'static str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Range { key, value: value.to_string(), bound })
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.run;
        check(!r.strategies.is_empty(), "run.strategies", "[]", "non-empty")?;
        check(!r.seeds.is_empty(), "run.seeds", "[]", "non-empty")?;
        check(!r.orders.is_empty(), "run.orders", "[]", "non-empty")?;

        let m = &self.model;
        check(m.hidden.iter().all(|&h| h > 0), "model.hidden", format!("{:?}", m.hidden), "every width >= 1")?;
        check(m.rank >= 1, "model.rank", m.rank, ">= 1")?;
        check(m.head_rank >= 1, "model.head_rank", m.head_rank, ">= 1")?;
        check(m.base_gain.is_finite() && m.base_gain >= 0.0, "model.base_gain", m.base_gain, ">= 0")?;
        check(m.a_init_std.is_finite() && m.a_init_std >= 0.0, "model.a_init_std", m.a_init_std, ">= 0")?;

        let t = &self.train;
        check(t.lr.is_finite() && t.lr >= 0.0, "train.lr", t.lr, ">= 0")?;
        check(t.epochs >= 1, "train.epochs", t.epochs, ">= 1")?;
        check(t.batch >= 1, "train.batch", t.batch, ">= 1")?;
        check(t.orth_coef.is_finite() && t.orth_coef >= 0.0, "train.orth_coef", t.orth_coef, ">= 0")?;
        check(t.memory_fraction > 0.0 && t.memory_fraction <= 1.0, "train.memory_fraction", t.memory_fraction, "(0, 1]")?;

        let i = &self.identification;
        check(unit(i.alpha1), "identification.alpha1", i.alpha1, "[0, 1]")?;
        check(unit(i.alpha2), "identification.alpha2", i.alpha2, "[0, 1]")?;
        check(unit(i.beta), "identification.beta", i.beta, "[0, 1]")?;
        check(i.fisher_batch >= 1, "identification.fisher_batch", i.fisher_batch, ">= 1")?;

        let f = &self.fusion;
        check(f.tau.is_finite() && f.tau > 0.0, "fusion.tau", f.tau, "> 0")?;
        check(unit(f.gamma), "fusion.gamma", f.gamma, "[0, 1]")?;
        check(unit(f.quantile), "fusion.quantile", f.quantile, "[0, 1]")?;
        check(unit(f.lambda), "fusion.lambda", f.lambda, "[0, 1]")?;
        check(unit(f.ema_decay), "fusion.ema_decay", f.ema_decay, "[0, 1]")?;

        let s = &self.stream;
        check(s.tasks >= 1, "stream.tasks", s.tasks, ">= 1")?;
        check(s.classes >= 2, "stream.classes", s.classes, ">= 2")?;
        check(s.dim >= 1, "stream.dim", s.dim, ">= 1")?;
        check(s.subspace_dim >= 1, "stream.subspace_dim", s.subspace_dim, ">= 1")?;
        check(s.n_train >= 1, "stream.n_train", s.n_train, ">= 1")?;
        check(s.n_test >= 1, "stream.n_test", s.n_test, ">= 1")?;
        check(unit(s.overlap), "stream.overlap", s.overlap, "[0, 1]")?;
        check(s.noise.is_finite() && s.noise >= 0.0, "stream.noise", s.noise, ">= 0")?;
        check(s.separation.is_finite() && s.separation > 0.0, "stream.separation", s.separation, "> 0")?;
        let spec = self.stream_spec(0);
        let needed = spec.shared_dims() + spec.tasks * spec.private_dims();
        check(needed <= s.dim, "stream.dim", s.dim, ">= shared + tasks * private directions")?;
        let shapes = self.continual(StrategyName::Seq, 0).model.layer_shapes();
        let (head, hidden) = shapes.split_last().expect("model has a head");
        for &(i, o, r) in hidden {
            check(r < i.min(o), "model.rank", r, "< min(in, out) of every hidden layer")?;
        }
        check(head.2 < head.0.min(head.1), "model.head_rank", head.2, "< min(last width, classes)")?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn stream_spec(&self, seed: u64) -> StreamSpec {
        let s = &self.stream;
        StreamSpec {
            tasks: s.tasks,
            dim: s.dim,
            classes: s.classes,
            n_train: s.n_train,
            n_val: s.n_val,
            n_test: s.n_test,
            overlap: s.overlap,
            noise: s.noise,
            subspace_dim: s.subspace_dim,
            separation: s.separation,
            seed,
        }
    }

    /// Core settings for one `(strategy, seed)` run.
    pub fn continual(&self, strategy: StrategyName, seed: u64) -> ContinualConfig {
        let strategy = Strategy::from(strategy);
        let m = &self.model;
        let t = &self.train;
        let i = &self.identification;
        let f = &self.fusion;
        ContinualConfig {
            strategy,
            model: ModelSpec {
                input_dim: self.stream.dim,
                hidden: m.hidden.clone(),
                classes: self.stream.classes,
                rank: m.rank,
                head_rank: m.head_rank,
                base_gain: m.base_gain,
                a_init_std: m.a_init_std,
            },
            train: TrainConfig {
                lr: t.lr,
                epochs: t.epochs,
                batch: t.batch,
                metric: match i.metric {
                    MetricName::FirstOrder => SensitivityMetric::FirstOrder,
                    MetricName::SecondOrder => SensitivityMetric::SecondOrder,
                },
                fisher_batch: i.fisher_batch,
                fisher_reduction: match i.fisher_reduction {
                    ReductionName::Mean => FisherReduction::Mean,
                    ReductionName::Sum => FisherReduction::Sum,
                },
                alpha1: i.alpha1,
                alpha2: i.alpha2,
                granularity: match i.granularity {
                    GranularityName::Matrix => Granularity::MatrixLevel,
                    GranularityName::Rank1 => Granularity::LoraRank1,
                },
                orth_coef: t.orth_coef,
                orth_convention: match t.orth_convention {
                    OrthName::Literal => OrthConvention::Literal,
                    OrthName::GramSmall => OrthConvention::GramSmall,
                },
            },
            fusion: FusionPolicy {
                strategy: strategy.fusion().unwrap_or(FusionStrategy::AdaptiveWeighted),
                gamma: f.gamma,
                tau: f.tau,
                lambda: f.lambda,
                quantile: f.quantile,
            },
            beta: i.beta,
            memory_fraction: t.memory_fraction,
            ema_decay: f.ema_decay,
            seed,
        }
    }
}
