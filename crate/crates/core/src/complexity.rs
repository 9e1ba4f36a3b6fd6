//! Static parameter, FLOPs and parallelism accounting.
//!
//! FLOPs are counted as multiply-accumulates of the dense projections only:
//! attention Q/K/V/O projections, both FFN matrices, and the output
//! projection. Attention score/value products, softmax, normalization and
//! embedding lookups are not counted. Under this convention a 6-6 base model
//! (d=512, V=32K) on a 30/30-token sample costs 1.81G.
//!
//! Cross-attention K/V projections run over the source tokens; everything
//! else in the decoder runs over the target tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sharing::{SharedSublayers, SharingPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub encoder: u64,
    pub decoder: u64,
    pub output_projection: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub params: u64,
    pub flops: u64,
    pub sequential_depth: usize,
    /// `1/sequential_depth`, as text.
    pub parallelism: String,
    pub src_len: usize,
    pub tgt_len: usize,
    pub param_breakdown: Breakdown,
    pub flops_breakdown: Breakdown,
}

impl ComplexityReport {
    pub fn parallelism_value(&self) -> f64 {
        1.0 / self.sequential_depth as f64
    }

    /// FLOPs in giga-MACs at two decimals, e.g. `1.81G`.
    pub fn flops_giga(&self) -> String {
        format_giga(self.flops)
    }
}

pub fn format_giga(macs: u64) -> String {
    format!("{:.2}G", macs as f64 / 1e9)
}

pub fn format_mega(count: u64) -> String {
    format!("{:.0}M", count as f64 / 1e6)
}

fn attn_params(d: u64) -> u64 {
    4 * d * d + 4 * d
}

fn ffn_params(d: u64, hidden: u64) -> u64 {
    2 * d * hidden + hidden + d
}

fn norm_params(d: u64) -> u64 {
    2 * d
}

/// Parameter counts split into (embedding, encoder, decoder + final norms).
pub fn param_breakdown(cfg: &ModelConfig) -> Breakdown {
    let d = cfg.width as u64;
    let hidden = cfg.ffn_hidden() as u64;
    let enc_layer = attn_params(d) + ffn_params(d, hidden) + 2 * norm_params(d);
    let dec_layer = 2 * attn_params(d) + ffn_params(d, hidden) + 3 * norm_params(d);
    Breakdown {
        encoder: cfg.enc_depth as u64 * enc_layer + norm_params(d),
        decoder: cfg.dec_depth as u64 * dec_layer + norm_params(d),
        output_projection: cfg.vocab as u64 * d,
    }
}

/// Trainable scalars: tied embedding, all unique layers, and the encoder and
/// decoder final norms. Independent of the sharing mode.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let b = param_breakdown(cfg);
    b.encoder + b.decoder + b.output_projection
}

/// Per-position `(attention multiplicity, ffn multiplicity)` of a stack.
fn multiplicities(plan: &SharingPlan) -> Vec<(u64, u64)> {
    plan.application_order
        .groups()
        .into_iter()
        .map(|g| {
            let n = g.len() as u64;
            let attn = if plan.sublayers == SharedSublayers::All {
                n
            } else {
                1
            };
            (attn, n)
        })
        .collect()
}

/// Multiply-accumulates of one forward pass on a `src_len`/`tgt_len` sample,
/// with the sharing plans taken from `cfg.sharing`.
pub fn flops_breakdown(cfg: &ModelConfig, src_len: usize, tgt_len: usize) -> Result<Breakdown> {
    if src_len == 0 || tgt_len == 0 {
        return Err(Error::config(
            "lengths",
            "source and target lengths must be at least 1",
        ));
    }
    cfg.sharing.validate(cfg.enc_depth, cfg.dec_depth)?;
    let d = cfg.width as u64;
    let ffn = 2 * d * cfg.ffn_hidden() as u64;
    let (s, t) = (src_len as u64, tgt_len as u64);
    let enc_plan = cfg.sharing.encoder_plan(cfg.enc_depth)?;
    let dec_plan = cfg.sharing.decoder_plan(cfg.dec_depth)?;
    let encoder = multiplicities(&enc_plan)
        .into_iter()
        .map(|(a, f)| s * (a * 4 * d * d + f * ffn))
        .sum();
    let decoder = multiplicities(&dec_plan)
        .into_iter()
        .map(|(a, f)| t * (a * 4 * d * d + a * 2 * d * d + f * ffn) + s * a * 2 * d * d)
        .sum();
    Ok(Breakdown {
        encoder,
        decoder,
        output_projection: t * d * cfg.vocab as u64,
    })
}

pub fn count_flops(cfg: &ModelConfig, src_len: usize, tgt_len: usize) -> Result<u64> {
    let b = flops_breakdown(cfg, src_len, tgt_len)?;
    Ok(b.encoder + b.decoder + b.output_projection)
}

/// Number of sequential layer applications and its reciprocal.
pub fn parallelism(cfg: &ModelConfig) -> Result<(usize, String)> {
    let depth = cfg.sharing.encoder_plan(cfg.enc_depth)?.sequential_depth()
        + cfg.sharing.decoder_plan(cfg.dec_depth)?.sequential_depth();
    Ok((depth, format!("1/{depth}")))
}

pub fn report(cfg: &ModelConfig, src_len: usize, tgt_len: usize) -> Result<ComplexityReport> {
    let flops_breakdown = flops_breakdown(cfg, src_len, tgt_len)?;
    let (sequential_depth, parallelism) = parallelism(cfg)?;
    Ok(ComplexityReport {
        params: count_params(cfg),
        flops: flops_breakdown.encoder
            + flops_breakdown.decoder
            + flops_breakdown.output_projection,
        sequential_depth,
        parallelism,
        src_len,
        tgt_len,
        param_breakdown: param_breakdown(cfg),
        flops_breakdown,
    })
}

/// Aligned plain-text rendering of one or more reports.
pub fn render_table(rows: &[(String, ComplexityReport)]) -> String {
    let header = [
        "model",
        "params",
        "flops",
        "flops(G)",
        "depth",
        "parallelism",
    ];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|(name, r)| {
            [
                name.clone(),
                r.params.to_string(),
                r.flops.to_string(),
                r.flops_giga(),
                r.sequential_depth.to_string(),
                r.parallelism.clone(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    for row in &body {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
