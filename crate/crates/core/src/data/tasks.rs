use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// First id available to task symbols.
pub const FIRST_SYMBOL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    /// Each output symbol mixes the aligned source symbol with its left
    /// neighbour: `t_i = (s_i + 3 s_{i-1}) mod m`, over symbol offsets.
    ModularTranslate,
}

impl TaskKind {
    /// Target sequence for `src`.
    pub fn apply(self, src: &[usize], vocab: usize) -> Vec<usize> {
        match self {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut t = src.to_vec();
                t.sort_unstable();
                t
            }
            TaskKind::ModularTranslate => {
                let m = vocab - FIRST_SYMBOL;
                let mut prev = 0;
                src.iter()
                    .map(|&s| {
                        let cur = s - FIRST_SYMBOL;
                        let out = (cur + 3 * prev) % m + FIRST_SYMBOL;
                        prev = cur;
                        out
                    })
                    .collect()
            }
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            "modular-translate" => Ok(TaskKind::ModularTranslate),
            other => Err(Error::config(
                "task.kind",
                format!("unknown task `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl TaskConfig {
    /// Reverse task over a 64-token vocabulary with lengths 5..=20.
    pub fn toy_reverse() -> Self {
        TaskConfig {
            kind: TaskKind::Reverse,
            vocab: 64,
            min_len: 5,
            max_len: 20,
            train_size: 20_000,
            valid_size: 200,
            test_size: 200,
            seed: 1234,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab <= FIRST_SYMBOL {
            return Err(Error::config(
                "task.vocab",
                format!("need more than the {FIRST_SYMBOL} reserved ids"),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(
                "task.min_len",
                format!("invalid length range [{}, {}]", self.min_len, self.max_len),
            ));
        }
        if self.train_size == 0 {
            return Err(Error::config("task.train_size", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Draws `train + valid + test` distinct sources from one seeded stream and
/// splits them in that order, so the splits never share a source.
pub fn generate(cfg: &TaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let total = cfg.train_size + cfg.valid_size + cfg.test_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::with_capacity(total);
    let mut examples = Vec::with_capacity(total);
    let budget = total.saturating_mul(100).max(10_000);
    let mut draws = 0;
    while examples.len() < total {
        if draws == budget {
            return Err(Error::Data(format!(
                "could not draw {total} distinct sequences from vocab {} and lengths {}..={}",
                cfg.vocab, cfg.min_len, cfg.max_len
            )));
        }
        draws += 1;
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let src: Vec<usize> = (0..len)
            .map(|_| rng.random_range(FIRST_SYMBOL..cfg.vocab))
            .collect();
        if seen.insert(src.clone()) {
            let tgt = cfg.kind.apply(&src, cfg.vocab);
            examples.push(Example { src, tgt });
        }
    }
    let test = examples.split_off(cfg.train_size + cfg.valid_size);
    let valid = examples.split_off(cfg.train_size);
    Ok(Dataset {
        train: examples,
        valid,
        test,
    })
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// One example per line: space-separated source ids, a tab, target ids.
pub fn to_lines(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        let _ = writeln!(out, "{}\t{}", join_ids(&e.src), join_ids(&e.tgt));
    }
    out
}

pub fn export(examples: &[Example], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_lines(examples)).map_err(|e| Error::io(path, e))
}

pub fn parse_ids(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Data(format!("bad token id `{t}`")))
        })
        .collect()
}
