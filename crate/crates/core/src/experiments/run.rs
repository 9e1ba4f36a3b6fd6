use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::complexity::{self, ComplexityReport};
use crate::data::{self, sentence_bleu3, token_accuracy, Dataset, Example, BOS, EOS};
use crate::error::{Error, Result};
use crate::experiments::config::ExperimentConfig;
use crate::model::checkpoint::Checkpoint;
use crate::model::TransformerModel;
use crate::sharing::ShareMode;
use crate::training::{train, AveragedEval, Divergence, RunRecord};

pub const STEPS_CSV: &str = "steps.csv";
pub const EVALS_CSV: &str = "evals.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const COMPLEXITY_JSON: &str = "complexity.json";
pub const CONFIG_TOML: &str = "config.toml";
pub const DECODES_TSV: &str = "decodes.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const AVERAGED_CKPT: &str = "averaged.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub examples: usize,
    pub mean_bleu3: f64,
    pub token_accuracy: f64,
    pub exact_match: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: ShareMode,
    pub factor: usize,
    pub seed: u64,
    pub params: u64,
    pub flops: u64,
    pub steps_completed: usize,
    pub diverged: Option<Divergence>,
    pub final_valid_loss: Option<f64>,
    pub final_token_accuracy: Option<f64>,
    pub averaged: Option<AveragedEval>,
    pub test: Option<TestMetrics>,
}

impl RunSummary {
    /// Validation loss of the averaged model when available, else of the last step.
    pub fn best_valid_loss(&self) -> Option<f64> {
        self.averaged
            .as_ref()
            .map(|a| a.valid_loss)
            .or(self.final_valid_loss)
    }
}

/// One decoded test example.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub src: Vec<usize>,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
}

pub fn decode_split(
    model: &TransformerModel,
    split: &[Example],
    max_len: usize,
) -> Result<Vec<Decoded>> {
    split
        .iter()
        .map(|e| {
            Ok(Decoded {
                src: e.src.clone(),
                reference: e.tgt.clone(),
                hypothesis: model.greedy_decode(&e.src, BOS, EOS, max_len)?,
            })
        })
        .collect()
}

pub fn test_metrics(decoded: &[Decoded]) -> Result<TestMetrics> {
    let n = decoded.len().max(1) as f64;
    let mut bleu = 0.0;
    let mut acc = 0.0;
    let mut exact = 0usize;
    for d in decoded {
        bleu += sentence_bleu3(&d.hypothesis, &d.reference)?;
        acc += token_accuracy(&d.hypothesis, &d.reference);
        exact += usize::from(d.hypothesis == d.reference);
    }
    Ok(TestMetrics {
        examples: decoded.len(),
        mean_bleu3: bleu / n,
        token_accuracy: acc / n,
        exact_match: exact as f64 / n,
    })
}

fn ids(seq: &[usize]) -> String {
    seq.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tab-separated `source`, `reference`, `hypothesis` id lists with a header.
pub fn decodes_tsv(decoded: &[Decoded]) -> String {
    let mut out = String::from("source\treference\thypothesis\n");
    for d in decoded {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            ids(&d.src),
            ids(&d.reference),
            ids(&d.hypothesis)
        );
    }
    out
}

pub fn parse_decodes_tsv(text: &str) -> Result<Vec<Decoded>> {
    let mut lines = text.lines();
    if lines.next() != Some("source\treference\thypothesis") {
        return Err(Error::Data("decode file lacks the expected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Data(format!(
                    "decode line needs 3 columns: `{line}`"
                )));
            }
            Ok(Decoded {
                src: data::tasks::parse_ids(cols[0])?,
                reference: data::tasks::parse_ids(cols[1])?,
                hypothesis: data::tasks::parse_ids(cols[2])?,
            })
        })
        .collect()
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Result of training one configuration, kept in memory.
pub struct TrainedRun {
    pub model: TransformerModel,
    pub record: RunRecord,
    pub summary: RunSummary,
    pub complexity: ComplexityReport,
    pub decoded: Option<Vec<Decoded>>,
}

/// Generates data, builds the model with the training seed, trains, and
/// optionally greedy-decodes the test split.
pub fn train_config(
    cfg: &ExperimentConfig,
    data: &Dataset,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainedRun> {
    cfg.validate()?;
    let complexity = complexity::report(&cfg.model, cfg.task.max_len, cfg.task.max_len + 1)?;
    let mut model = TransformerModel::new(cfg.model.clone(), cfg.train.seed)?;
    let record = train(&mut model, data, &cfg.train, checkpoint_dir)?;
    let decoded = if cfg.output.decode_test && !record.is_diverged() && !data.test.is_empty() {
        Some(decode_split(&model, &data.test, cfg.task.max_len + 5)?)
    } else {
        None
    };
    let summary = RunSummary {
        mode: cfg.model.sharing.mode,
        factor: cfg.model.sharing.factor,
        seed: cfg.train.seed,
        params: complexity.params,
        flops: complexity.flops,
        steps_completed: record.steps.len(),
        diverged: record.diverged.clone(),
        final_valid_loss: record.final_valid_loss(),
        final_token_accuracy: record.final_eval().map(|e| e.token_accuracy),
        averaged: record.averaged.clone(),
        test: decoded.as_deref().map(test_metrics).transpose()?,
    };
    Ok(TrainedRun {
        model,
        record,
        summary,
        complexity,
        decoded,
    })
}

/// Trains one configuration and writes every artifact under `out_dir`.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = data::generate(&cfg.task)?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let run = train_config(
        cfg,
        &data,
        cfg.output.checkpoints.then_some(ckpt_dir.as_path()),
    )?;
    write(&out_dir.join(CONFIG_TOML), cfg.to_toml())?;
    write(&out_dir.join(STEPS_CSV), run.record.steps_csv())?;
    write(&out_dir.join(EVALS_CSV), run.record.evals_csv())?;
    write(&out_dir.join(COMPLEXITY_JSON), to_json(&run.complexity))?;
    write(&out_dir.join(SUMMARY_JSON), to_json(&run.summary))?;
    if let Some(decoded) = &run.decoded {
        write(&out_dir.join(DECODES_TSV), decodes_tsv(decoded))?;
    }
    if cfg.output.checkpoints && run.record.averaged.is_some() {
        Checkpoint::from_store(&run.model.store, Default::default())
            .save(ckpt_dir.join(AVERAGED_CKPT))?;
    }
    Ok(run.summary)
}
