//! Runs every `(strategy, seed, order)` triple of a config and writes the
//! per-run and aggregate CSV files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use skillfuse::bench::{generate_stream, task_order_permutations};
use skillfuse::driver::run_continual;
use skillfuse::metrics::{metric_ap, metric_bwt, metric_fwt};
use skillfuse::RunOutput;

use crate::config::{RunConfig, StrategyName};

pub const EVAL_FILE: &str = "eval_matrix.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const FUSION_FILE: &str = "fusion_report.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunKey {
    pub strategy: StrategyName,
    pub seed: u64,
    pub order: u64,
}

impl RunKey {
    pub fn run_id(&self) -> String {
        format!("{}_seed{}_order{}", skillfuse::driver::Strategy::from(self.strategy), self.seed, self.order)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub key: RunKey,
    pub ap: f64,
    /// `None` for single-task streams.
    pub fwt: Option<f64>,
    pub bwt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategySummary {
    pub strategy: StrategyName,
    pub runs: usize,
    pub ap: (f64, f64),
    pub fwt: Option<(f64, f64)>,
    pub bwt: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub runs: Vec<RunMetrics>,
    pub summary: Vec<StrategySummary>,
}

impl ExperimentOutcome {
    pub fn strategy(&self, s: StrategyName) -> Option<&StrategySummary> {
        self.summary.iter().find(|x| x.strategy == s)
    }
}

/// Every triple in config order: strategies, then seeds, then orders.
pub fn run_keys(cfg: &RunConfig) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &strategy in &cfg.run.strategies {
        for &seed in &cfg.run.seeds {
            for &order in &cfg.run.orders {
                keys.push(RunKey { strategy, seed, order });
            }
        }
    }
    keys
}

/// Trains one run in memory without touching the file system.
pub fn execute_run(cfg: &RunConfig, key: RunKey) -> Result<RunOutput> {
    let stream = generate_stream(&cfg.stream_spec(key.seed))?;
    let stream = task_order_permutations(&stream, key.order);
    let out = run_continual(&stream, &cfg.continual(key.strategy, key.seed))?;
    Ok(out)
}

pub fn run_metrics(key: RunKey, out: &RunOutput) -> Result<RunMetrics> {
    let single = out.eval.tasks() < 2;
    Ok(RunMetrics {
        key,
        ap: metric_ap(&out.eval)?,
        fwt: if single { None } else { Some(metric_fwt(&out.eval)?) },
        bwt: if single { None } else { Some(metric_bwt(&out.eval)?) },
    })
}

/// Runs the whole grid, writing under `cfg.run.output_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutcome> {
    let root = cfg.run.output_dir.clone();
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    write(&root.join(CONFIG_FILE), &cfg.to_toml())?;

    let keys = run_keys(cfg);
    let job = |key: &RunKey| -> Result<RunMetrics> {
        let out = execute_run(cfg, *key).with_context(|| format!("run {}", key.run_id()))?;
        let dir = root.join(key.run_id());
        write_run(cfg, *key, &out, &dir)?;
        run_metrics(*key, &out)
    };
    let results: Vec<Result<RunMetrics>> = if cfg.run.workers == 1 {
        keys.iter().map(job).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.workers).build()?;
        pool.install(|| keys.par_iter().map(job).collect())
    };
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;

    write(&root.join(METRICS_FILE), &metrics_csv(&runs))?;
    let summary = summarize(&cfg.run.strategies, &runs);
    write(&root.join(SUMMARY_FILE), &summary_csv(&summary))?;
    Ok(ExperimentOutcome { output_dir: root, runs, summary })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_run(cfg: &RunConfig, key: RunKey, out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join(EVAL_FILE), &eval_csv(out))?;
    write(&dir.join(METRICS_FILE), &metrics_csv(&[run_metrics(key, out)?]))?;
    if !out.scores.is_empty() {
        write(&dir.join(IMPORTANCE_FILE), &importance_csv(out))?;
    }
    write(&dir.join(FUSION_FILE), &fusion_csv(out))?;
    write(&dir.join(CHECKPOINT_FILE), &out.model.to_checkpoint())?;
    if cfg.run.dump_data {
        let data = dir.join("data");
        fs::create_dir_all(&data)?;
        let stream = task_order_permutations(&generate_stream(&cfg.stream_spec(key.seed))?, key.order);
        for (k, task) in stream.tasks.iter().enumerate() {
            write(&data.join(format!("task{}_train.csv", k + 1)), &task.train.to_csv())?;
            write(&data.join(format!("task{}_test.csv", k + 1)), &task.test.to_csv())?;
        }
    }
    Ok(())
}

pub fn eval_csv(out: &RunOutput) -> String {
    let mut s = String::from("after_task,eval_task,accuracy\n");
    for (i, j, v) in out.eval.entries() {
        writeln!(s, "{i},{j},{v}").unwrap();
    }
    s
}

pub fn importance_csv(out: &RunOutput) -> String {
    let mut s = String::from("task_id,unit_id,raw_score,norm_score,cumulative_score\n");
    for t in &out.scores {
        for (u, unit) in t.raw.units().iter().enumerate() {
            writeln!(s, "{},{},{},{},{}", t.task, unit, t.raw.scores()[u], t.normalized.scores()[u], t.cumulative.scores()[u])
                .unwrap();
        }
    }
    s
}

pub fn fusion_csv(out: &RunOutput) -> String {
    let mut s = String::from("task_id,unit_id,strategy,w_prev,w_cur,case_label\n");
    for (task, report) in &out.fusion {
        for u in &report.units {
            writeln!(s, "{task},{},{},{},{},{}", u.unit, report.strategy, u.w_prev, u.w_cur, u.case).unwrap();
        }
    }
    s
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_csv(runs: &[RunMetrics]) -> String {
    let mut s = String::from("run_id,seed,strategy,AP,FWT,BWT\n");
    for r in runs {
        let strategy = skillfuse::driver::Strategy::from(r.key.strategy);
        writeln!(s, "{},{},{strategy},{},{},{}", r.key.run_id(), r.key.seed, r.ap, opt(r.fwt), opt(r.bwt)).unwrap();
    }
    s
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(strategies: &[StrategyName], runs: &[RunMetrics]) -> Vec<StrategySummary> {
    let mut seen = Vec::new();
    for &s in strategies {
        if seen.contains(&s) {
            continue;
        }
        seen.push(s);
    }
    seen.into_iter()
        .map(|strategy| {
            let rs: Vec<&RunMetrics> = runs.iter().filter(|r| r.key.strategy == strategy).collect();
            let ap: Vec<f64> = rs.iter().map(|r| r.ap).collect();
            let fwt: Option<Vec<f64>> = rs.iter().map(|r| r.fwt).collect();
            let bwt: Option<Vec<f64>> = rs.iter().map(|r| r.bwt).collect();
            StrategySummary {
                strategy,
                runs: rs.len(),
                ap: mean_std(&ap),
                fwt: fwt.map(|v| mean_std(&v)),
                bwt: bwt.map(|v| mean_std(&v)),
            }
        })
        .collect()
}

pub fn summary_csv(summary: &[StrategySummary]) -> String {
    let mut s = String::from("strategy,runs,AP_mean,AP_std,FWT_mean,FWT_std,BWT_mean,BWT_std\n");
    let pair = |p: Option<(f64, f64)>| (opt(p.map(|x| x.0)), opt(p.map(|x| x.1)));
    for r in summary {
        let (fm, fs) = pair(r.fwt);
        let (bm, bs) = pair(r.bwt);
        let strategy = skillfuse::driver::Strategy::from(r.strategy);
        writeln!(s, "{strategy},{},{},{},{fm},{fs},{bm},{bs}", r.runs, r.ap.0, r.ap.1).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_order() {
        let mut cfg = RunConfig::default();
        cfg.run.strategies = vec![StrategyName::Seq, StrategyName::Coarse];
        cfg.run.seeds = vec![3, 4, 5];
        cfg.run.orders = vec![0, 1];
        let keys = run_keys(&cfg);
        assert_eq!(keys.len(), 12);
        assert_eq!(keys[0].run_id(), "seq_seed3_order0");
        assert_eq!(keys[11].run_id(), "coarse_seed5_order1");
    }
}
