use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::sentence_bleu3;
use crate::error::{Error, Result};
use crate::experiments::run::{parse_decodes_tsv, to_json, write, Decoded, DECODES_TSV};

pub const ANALYSIS_JSON: &str = "analysis.json";
pub const BUCKET_LABELS: [&str; 6] = ["<10", "<20", "<30", "<40", "<50", "50+"];

/// Index into [`BUCKET_LABELS`] for a value on a 0..100 style scale.
pub fn bucket_of(value: f64) -> usize {
    if value < 0.0 || value.is_nan() {
        return 0;
    }
    ((value / 10.0).floor() as usize).min(5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub label: String,
    pub count: usize,
    /// Mean sentence BLEU in percent; `None` for an empty bucket.
    pub mean_bleu3: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub examples: usize,
    /// Number of sentences per BLEU-percent bucket.
    pub bleu_histogram: Vec<(String, usize)>,
    /// Mean BLEU per reference-length bucket.
    pub by_length: Vec<LengthBucket>,
}

pub fn bucket_report(decoded: &[Decoded]) -> Result<BucketReport> {
    let mut hist = [0usize; 6];
    let mut len_sum = [0.0f64; 6];
    let mut len_count = [0usize; 6];
    for d in decoded {
        let bleu = 100.0 * sentence_bleu3(&d.hypothesis, &d.reference)?;
        hist[bucket_of(bleu)] += 1;
        let lb = bucket_of(d.reference.len() as f64);
        len_sum[lb] += bleu;
        len_count[lb] += 1;
    }
    Ok(BucketReport {
        examples: decoded.len(),
        bleu_histogram: BUCKET_LABELS
            .iter()
            .zip(hist)
            .map(|(l, c)| (l.to_string(), c))
            .collect(),
        by_length: (0..6)
            .map(|i| LengthBucket {
                label: BUCKET_LABELS[i].to_string(),
                count: len_count[i],
                mean_bleu3: (len_count[i] > 0).then(|| len_sum[i] / len_count[i] as f64),
            })
            .collect(),
    })
}

pub fn render_buckets(r: &BucketReport) -> String {
    let mut out = String::from("bleu3(%)  sentences\n");
    for (label, count) in &r.bleu_histogram {
        let _ = writeln!(out, "{label:<8}  {count:>9}");
    }
    out.push_str("\nlength  sentences  mean bleu3(%)\n");
    for b in &r.by_length {
        let mean = b.mean_bleu3.map_or("-".to_string(), |m| format!("{m:.2}"));
        let _ = writeln!(out, "{:<6}  {:>9}  {:>13}", b.label, b.count, mean);
    }
    out
}

/// Reads the decoded test outputs of a finished run and writes `analysis.json`.
pub fn cmd_analyze(run_dir: &Path) -> Result<BucketReport> {
    let path = run_dir.join(DECODES_TSV);
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} has no decoded outputs ({DECODES_TSV})",
            run_dir.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report = bucket_report(&parse_decodes_tsv(&text)?)?;
    write(&run_dir.join(ANALYSIS_JSON), to_json(&report))?;
    Ok(report)
}
