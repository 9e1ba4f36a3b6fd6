use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::config::ExperimentConfig;
use crate::experiments::run::{cmd_run, to_json, write, RunSummary};
use crate::sharing::{ShareMode, SharingConfig};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `NONE`, `NONE+tuned`, or the sharing mode.
    pub label: String,
    pub mode: ShareMode,
    pub factor: usize,
    pub tuned: bool,
    pub params: u64,
    pub flops: u64,
    pub diverged: bool,
    pub valid_loss: Option<f64>,
    pub token_accuracy: Option<f64>,
    pub test_bleu3: Option<f64>,
}

impl SweepRow {
    fn new(label: String, tuned: bool, s: &RunSummary) -> Self {
        SweepRow {
            label,
            mode: s.mode,
            factor: s.factor,
            tuned,
            params: s.params,
            flops: s.flops,
            diverged: s.diverged.is_some(),
            valid_loss: s.final_valid_loss,
            token_accuracy: s.final_token_accuracy,
            test_bleu3: s.test.as_ref().map(|t| t.mean_bleu3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_COLUMNS: &str =
    "label,mode,n,tuned,params,flops,diverged,valid_loss,token_accuracy,test_bleu3";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_COLUMNS}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.label,
                r.mode,
                r.factor,
                r.tuned,
                r.params,
                r.flops,
                r.diverged,
                opt(r.valid_loss),
                opt(r.token_accuracy),
                opt(r.test_bleu3)
            );
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<12} {:>3} {:>10} {:>12} {:>10} {:>8} {:>8}\n",
            "run", "n", "params", "flops", "valid", "acc", "bleu3"
        );
        for r in &self.rows {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            let valid = if r.diverged {
                "diverged".to_string()
            } else {
                f(r.valid_loss)
            };
            let _ = writeln!(
                out,
                "{:<12} {:>3} {:>10} {:>12} {:>10} {:>8} {:>8}",
                r.label,
                r.factor,
                r.params,
                r.flops,
                valid,
                f(r.token_accuracy),
                f(r.test_bleu3)
            );
        }
        out
    }
}

/// One run per `(mode, n)` plus the unshared baseline and the unshared
/// baseline with tuned hyperparameters, each in its own subdirectory.
pub fn cmd_sweep_share(
    cfg: &ExperimentConfig,
    modes: &[ShareMode],
    n_list: &[usize],
    out_dir: &Path,
) -> Result<SweepReport> {
    if n_list.is_empty() {
        return Err(Error::config("n_list", "needs at least one share factor"));
    }
    if modes.is_empty() || modes.contains(&ShareMode::None) {
        return Err(Error::config("modes", "list one or more of SIL, SIB, SIM"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let base = {
        let mut c = cfg.clone();
        c.model.sharing = SharingConfig {
            mode: ShareMode::None,
            factor: 1,
            encoder_order: None,
            decoder_order: None,
            ..cfg.model.sharing.clone()
        };
        c
    };
    let mut rows = Vec::new();
    rows.push(SweepRow::new(
        "NONE".into(),
        false,
        &cmd_run(&base, &out_dir.join("none"))?,
    ));
    let mut tuned = base.clone();
    tuned.train = base.train.tuned();
    rows.push(SweepRow::new(
        "NONE+tuned".into(),
        true,
        &cmd_run(&tuned, &out_dir.join("none_tuned"))?,
    ));
    for &mode in modes {
        for &n in n_list {
            let mut c = base.clone();
            c.model.sharing.mode = mode;
            c.model.sharing.factor = n;
            let dir = out_dir.join(format!("{}_n{n}", mode.as_str().to_lowercase()));
            rows.push(SweepRow::new(mode.to_string(), false, &cmd_run(&c, &dir)?));
        }
    }
    let report = SweepReport { rows };
    write(&out_dir.join(SWEEP_CSV), report.to_csv())?;
    write(&out_dir.join(SWEEP_JSON), to_json(&report))?;
    Ok(report)
}
