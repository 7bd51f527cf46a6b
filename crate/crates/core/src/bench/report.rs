//! Report emission: a long-format CSV, per-curve CSVs matching the aggregate
//! rank/regret plots, and a compact summary table.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ComparisonReport;
use crate::error::{Error, Result};

/// One long-format row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    pub optimizer: String,
    pub task: usize,
    pub rep: usize,
    pub step: usize,
    pub regret: f64,
    pub rank: f64,
}

/// Writes `report_long.csv`, `curve_regret.csv`, `curve_rank.csv` and
/// `summary.csv` into a directory.
pub fn emit_report(report: &ComparisonReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut long = fs::File::create(dir.join("report_long.csv"))?;
    writeln!(long, "optimizer,task,rep,step,regret,rank")?;
    for r in &report.records {
        writeln!(
            long,
            "{},{},{},{},{},{}",
            r.optimizer, r.task, r.rep, r.step, r.regret, r.rank
        )?;
    }

    for (file, mean, ci) in [
        ("curve_regret.csv", &report.regret_mean, &report.regret_ci),
        ("curve_rank.csv", &report.rank_mean, &report.rank_ci),
    ] {
        let mut out = fs::File::create(dir.join(file))?;
        write!(out, "step")?;
        for name in &report.optimizers {
            write!(out, ",{name}_mean,{name}_ci95")?;
        }
        writeln!(out)?;
        for step in 0..report.horizon {
            write!(out, "{step}")?;
            for opt in 0..report.optimizers.len() {
                write!(out, ",{},{}", mean[opt][step], ci[opt][step])?;
            }
            writeln!(out)?;
        }
    }

    let mut summary = fs::File::create(dir.join("summary.csv"))?;
    writeln!(
        summary,
        "optimizer,final_regret,final_regret_ci95,final_rank,final_rank_ci95"
    )?;
    for (i, name) in report.optimizers.iter().enumerate() {
        writeln!(
            summary,
            "{name},{},{},{},{}",
            report.regret_mean[i][report.horizon - 1],
            report.regret_ci[i][report.horizon - 1],
            report.rank_mean[i][report.horizon - 1],
            report.rank_ci[i][report.horizon - 1],
        )?;
    }
    writeln!(summary)?;
    writeln!(summary, "pair_a,pair_b,wins_a,wins_b,ties")?;
    for p in &report.pairwise {
        writeln!(
            summary,
            "{},{},{},{},{}",
            p.a, p.b, p.wins_a, p.wins_b, p.ties
        )?;
    }
    Ok(())
}

/// Reads a long-format CSV back into records.
pub fn read_long_csv(path: &Path) -> Result<Vec<LongRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "optimizer,task,rep,step,regret,rank" {
        return Err(Error::Domain(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Domain(format!("bad row {lineno}: {line:?}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Domain(format!("bad number {s:?} on row {lineno}")))
        };
        out.push(LongRecord {
            optimizer: parts[0].to_string(),
            task: parse(parts[1])? as usize,
            rep: parse(parts[2])? as usize,
            step: parse(parts[3])? as usize,
            regret: parse(parts[4])?,
            rank: parse(parts[5])?,
        });
    }
    Ok(out)
}
