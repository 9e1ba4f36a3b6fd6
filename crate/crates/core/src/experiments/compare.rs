use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::experiments::config::ExperimentConfig;
use crate::experiments::run::{to_json, train_config, write};
use crate::training::RunRecord;

pub const COMPARE_CSV: &str = "compare.csv";
pub const COMPARE_JSON: &str = "compare.json";
pub const COMPARE_COLUMNS: &str = "seed,step,epoch,valid_loss_a,valid_loss_b,gap";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub seed: u64,
    pub step: usize,
    pub epoch: f64,
    pub valid_loss_a: f64,
    pub valid_loss_b: f64,
    /// `valid_loss_b - valid_loss_a`.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub a_diverged: bool,
    pub b_diverged: bool,
    pub final_a: Option<f64>,
    pub final_b: Option<f64>,
    /// `final_b - final_a` when both runs finished.
    pub final_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub seeds: usize,
    pub mean_gap: Option<f64>,
    pub std_gap: Option<f64>,
    /// Seeds where `b` finished at or below `a`.
    pub b_at_or_below_a: usize,
    pub a_diverged: usize,
    pub b_diverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub curve: Vec<CurvePoint>,
    pub seeds: Vec<SeedOutcome>,
    pub stats: GapStats,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{COMPARE_COLUMNS}\n");
        for p in &self.curve {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                p.seed, p.step, p.epoch, p.valid_loss_a, p.valid_loss_b, p.gap
            );
        }
        out
    }

    pub fn render(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:>6} {:>10} {:>10} {:>10}\n",
            "seed", "final_a", "final_b", "gap"
        );
        for s in &self.seeds {
            let _ = writeln!(
                out,
                "{:>6} {:>10} {:>10} {:>10}",
                s.seed,
                if s.a_diverged {
                    "diverged".into()
                } else {
                    f(s.final_a)
                },
                if s.b_diverged {
                    "diverged".into()
                } else {
                    f(s.final_b)
                },
                f(s.final_gap)
            );
        }
        let st = &self.stats;
        let _ = writeln!(
            out,
            "mean gap {} (std {}), b <= a in {}/{} seeds",
            f(st.mean_gap),
            f(st.std_gap),
            st.b_at_or_below_a,
            st.seeds
        );
        out
    }
}

fn check_comparable(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<()> {
    if a.task != b.task {
        return Err(Error::config(
            "task",
            "compared configs must use the same task",
        ));
    }
    let (ta, tb) = (&a.train, &b.train);
    if ta.eval_every != tb.eval_every
        || ta.max_steps != tb.max_steps
        || ta.steps_per_epoch != tb.steps_per_epoch
    {
        return Err(Error::config(
            "train.eval_every",
            "compared configs must share eval_every, max_steps and steps_per_epoch",
        ));
    }
    Ok(())
}

fn run_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<RunRecord> {
    let mut c = cfg.clone();
    c.train.seed = seed;
    c.output.decode_test = false;
    Ok(train_config(&c, data, None)?.record)
}

/// Trains both configurations on every seed and pairs their validation curves.
pub fn compare_records(runs: &[(u64, RunRecord, RunRecord)]) -> CompareReport {
    let mut curve = Vec::new();
    let mut seeds = Vec::new();
    for (seed, a, b) in runs {
        for (ea, eb) in a.evals.iter().zip(&b.evals) {
            curve.push(CurvePoint {
                seed: *seed,
                step: ea.step,
                epoch: ea.epoch,
                valid_loss_a: ea.valid_loss,
                valid_loss_b: eb.valid_loss,
                gap: eb.valid_loss - ea.valid_loss,
            });
        }
        let final_a = (!a.is_diverged()).then(|| a.final_valid_loss()).flatten();
        let final_b = (!b.is_diverged()).then(|| b.final_valid_loss()).flatten();
        seeds.push(SeedOutcome {
            seed: *seed,
            a_diverged: a.is_diverged(),
            b_diverged: b.is_diverged(),
            final_a,
            final_b,
            final_gap: final_a.zip(final_b).map(|(x, y)| y - x),
        });
    }
    let gaps: Vec<f64> = seeds.iter().filter_map(|s| s.final_gap).collect();
    let mean = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
    let std = mean
        .map(|m| (gaps.iter().map(|g| (g - m).powi(2)).sum::<f64>() / gaps.len() as f64).sqrt());
    let stats = GapStats {
        seeds: seeds.len(),
        mean_gap: mean,
        std_gap: std,
        b_at_or_below_a: gaps.iter().filter(|&&g| g <= 0.0).count(),
        a_diverged: seeds.iter().filter(|s| s.a_diverged).count(),
        b_diverged: seeds.iter().filter(|s| s.b_diverged).count(),
    };
    CompareReport {
        curve,
        seeds,
        stats,
    }
}

pub fn cmd_compare(
    a: &ExperimentConfig,
    b: &ExperimentConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<CompareReport> {
    a.validate()?;
    b.validate()?;
    check_comparable(a, b)?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "needs at least one seed"));
    }
    let data = data::generate(&a.task)?;
    let runs = seeds
        .iter()
        .map(|&s| Ok((s, run_seed(a, &data, s)?, run_seed(b, &data, s)?)))
        .collect::<Result<Vec<_>>>()?;
    let report = compare_records(&runs);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(COMPARE_CSV), report.to_csv())?;
        write(&dir.join(COMPARE_JSON), to_json(&report))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_schedules_rejected() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.eval_every = 7;
        assert!(check_comparable(&a, &b).is_err());
        let mut c = a.clone();
        c.task.seed = 9;
        assert!(check_comparable(&a, &c).is_err());
    }
}
