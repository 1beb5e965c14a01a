//! Post-hoc views of a finished run directory: heatmap data and a text
//! report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use skillfuse::metrics::{metric_ap, metric_bwt, metric_fwt};
use skillfuse::units::SkillUnitId;
use skillfuse::EvalMatrix;

use crate::experiment::{EVAL_FILE, IMPORTANCE_FILE, SUMMARY_FILE};

pub const HEATMAP_FILE: &str = "heatmap.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRow {
    pub task: usize,
    pub unit: SkillUnitId,
    pub score: f64,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Data rows of a CSV with the expected header, split on `,`.
fn rows<'a>(text: &'a str, header: &str, path: &Path) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        other => bail!("{}: expected header `{header}`, found {:?}", path.display(), other),
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != width {
                bail!("{}:{}: expected {width} fields", path.display(), i + 2);
            }
            Ok(f)
        })
        .collect()
}

/// Task × unit matrix of normalized importances from `importance.csv`,
/// tasks ascending, units in canonical order.
pub fn heatmap_rows(run_dir: &Path) -> Result<Vec<HeatmapRow>> {
    let path = run_dir.join(IMPORTANCE_FILE);
    if !path.exists() {
        bail!("{} not found; heatmaps need a run of an identifying strategy", path.display());
    }
    let text = read(&path)?;
    let mut out = Vec::new();
    for f in rows(&text, "task_id,unit_id,raw_score,norm_score,cumulative_score", &path)? {
        let task: usize = f[0].parse().with_context(|| format!("task id `{}`", f[0]))?;
        let unit: SkillUnitId = f[1].parse().map_err(|e| anyhow!("unit id `{}`: {e}", f[1]))?;
        let score: f64 = f[3].parse().with_context(|| format!("score `{}`", f[3]))?;
        out.push(HeatmapRow { task, unit, score });
    }
    out.sort_by(|a, b| a.task.cmp(&b.task).then(a.unit.cmp(&b.unit)));
    Ok(out)
}

pub fn heatmap_csv(rows: &[HeatmapRow]) -> String {
    let mut s = String::from("task_id,unit_id,norm_score\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.task, r.unit, r.score).unwrap();
    }
    s
}

/// Writes `heatmap.csv` next to the run's importance file.
pub fn export_heatmap_data(run_dir: &Path) -> Result<std::path::PathBuf> {
    let rows = heatmap_rows(run_dir)?;
    let path = run_dir.join(HEATMAP_FILE);
    fs::write(&path, heatmap_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn read_eval_matrix(path: &Path) -> Result<EvalMatrix> {
    let text = read(path)?;
    let entries = rows(&text, "after_task,eval_task,accuracy", path)?
        .into_iter()
        .map(|f| Ok((f[0].parse::<usize>()?, f[1].parse::<usize>()?, f[2].parse::<f64>()?)))
        .collect::<Result<Vec<_>>>()?;
    let k = entries.iter().map(|e| e.0.max(e.1)).max().unwrap_or(0);
    let mut m = EvalMatrix::new(k);
    for (i, j, v) in entries {
        m.set(i, j, v)?;
    }
    Ok(m)
}

/// Human-readable summary of an experiment directory (with `summary.csv`)
/// or of a single run directory (with `eval_matrix.csv`).
pub fn report(dir: &Path) -> Result<String> {
    let mut s = String::new();
    let summary = dir.join(SUMMARY_FILE);
    if summary.exists() {
        let text = read(&summary)?;
        let header = "strategy,runs,AP_mean,AP_std,FWT_mean,FWT_std,BWT_mean,BWT_std";
        writeln!(s, "{:<14} {:>4}  {:>17}  {:>17}  {:>17}", "strategy", "runs", "AP", "FWT", "BWT")?;
        for f in rows(&text, header, &summary)? {
            let cell = |m: &str, sd: &str| -> String {
                match (m.parse::<f64>(), sd.parse::<f64>()) {
                    (Ok(m), Ok(sd)) => format!("{m:.4} ± {sd:.4}"),
                    _ => "n/a".to_string(),
                }
            };
            writeln!(s, "{:<14} {:>4}  {:>17}  {:>17}  {:>17}", f[0], f[1], cell(f[2], f[3]), cell(f[4], f[5]), cell(f[6], f[7]))?;
        }
        return Ok(s);
    }
    let eval = dir.join(EVAL_FILE);
    if !eval.exists() {
        bail!("{} holds neither {SUMMARY_FILE} nor {EVAL_FILE}", dir.display());
    }
    let m = read_eval_matrix(&eval)?;
    let k = m.tasks();
    write!(s, "after\\eval")?;
    for j in 1..=k {
        write!(s, " {j:>7}")?;
    }
    writeln!(s)?;
    for i in 1..=k {
        write!(s, "{i:>10}")?;
        for j in 1..=k {
            match m.get(i, j) {
                Some(v) => write!(s, " {v:>7.4}")?,
                None => write!(s, " {:>7}", "-")?,
            }
        }
        writeln!(s)?;
    }
    writeln!(s, "AP  {:.4}", metric_ap(&m)?)?;
    if k >= 2 {
        writeln!(s, "FWT {:.4}", metric_fwt(&m)?)?;
        writeln!(s, "BWT {:.4}", metric_bwt(&m)?)?;
    }
    Ok(s)
}
