use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::TransformerModel;

/// Gradient of one shared parameter against its per-use copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGradStat {
    pub name: String,
    pub uses: usize,
    pub shared_norm: f64,
    pub mean_use_norm: f64,
    /// `shared_norm / mean_use_norm`; `None` when every use has zero gradient.
    pub ratio: Option<f64>,
    /// Max abs difference between the shared gradient and the sum of use gradients.
    pub sum_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradScaleReport {
    pub params: Vec<ParamGradStat>,
    pub max_sum_error: f64,
    pub min_ratio: f64,
    pub median_ratio: f64,
    pub max_ratio: f64,
}

fn norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Compares gradients held in `shared` with those held in `unshared`, where
/// `origin[j]` names the shared parameter that unshared parameter `j` copies.
pub fn compare_gradients(
    shared: &ParamStore,
    unshared: &ParamStore,
    origin: &[ParamId],
) -> Result<GradScaleReport> {
    if origin.len() != unshared.len() {
        return Err(Error::Contract(format!(
            "origin map has {} entries for {} parameters",
            origin.len(),
            unshared.len()
        )));
    }
    let mut uses: Vec<Vec<ParamId>> = vec![Vec::new(); shared.len()];
    for (j, &o) in origin.iter().enumerate() {
        let src = uses
            .get_mut(o.0)
            .ok_or_else(|| Error::Contract(format!("origin {} outside the shared store", o.0)))?;
        if unshared.get(ParamId(j)).value.shape() != shared.get(o).value.shape() {
            return Err(Error::Contract(format!(
                "`{}` and its copy differ in shape",
                shared.get(o).name
            )));
        }
        src.push(ParamId(j));
    }
    let mut params = Vec::new();
    for (i, copies) in uses.iter().enumerate() {
        let p = shared.get(ParamId(i));
        let mut sum = vec![0.0; p.grad.numel()];
        let mut use_norms = 0.0;
        for &c in copies {
            let g = unshared.get(c).grad.data();
            for (s, v) in sum.iter_mut().zip(g) {
                *s += v;
            }
            use_norms += norm(g);
        }
        let sum_error = sum
            .iter()
            .zip(p.grad.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let shared_norm = norm(p.grad.data());
        let mean_use_norm = if copies.is_empty() {
            0.0
        } else {
            use_norms / copies.len() as f64
        };
        params.push(ParamGradStat {
            name: p.name.clone(),
            uses: copies.len(),
            shared_norm,
            mean_use_norm,
            ratio: (mean_use_norm > 0.0).then(|| shared_norm / mean_use_norm),
            sum_error,
        });
    }
    let mut ratios: Vec<f64> = params.iter().filter_map(|p| p.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    let pick = |i: usize| ratios.get(i).copied().unwrap_or(f64::NAN);
    Ok(GradScaleReport {
        max_sum_error: params.iter().map(|p| p.sum_error).fold(0.0, f64::max),
        min_ratio: pick(0),
        median_ratio: pick(ratios.len() / 2),
        max_ratio: ratios.last().copied().unwrap_or(f64::NAN),
        params,
    })
}

fn batch_gradients(model: &mut TransformerModel, batch: &Batch) -> Result<()> {
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &batch.src, &batch.tgt_in, None)?;
    let loss = tape.cross_entropy(logits, &batch.targets, 0.0)?;
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    Ok(())
}

/// Runs the shared model and its per-use copy on the same batch, without
/// dropout, and compares the gradients parameter by parameter.
pub fn grad_scale_probe(
    shared: &mut TransformerModel,
    unshared: &mut TransformerModel,
    origin: &[ParamId],
    batch: &Batch,
) -> Result<GradScaleReport> {
    batch_gradients(shared, batch)?;
    batch_gradients(unshared, batch)?;
    compare_gradients(&shared.store, &unshared.store, origin)
}

/// [`grad_scale_probe`] against a freshly built per-use copy of `shared`.
pub fn probe_shared_model(shared: &mut TransformerModel, batch: &Batch) -> Result<GradScaleReport> {
    let (mut unshared, origin) = shared.unshared_clone();
    grad_scale_probe(shared, &mut unshared, &origin, batch)
}
