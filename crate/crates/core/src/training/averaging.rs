use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::tensor::Tensor;

/// Elementwise mean of the given checkpoints. All must hold the same tensor
/// names and shapes, in the same order.
pub fn average(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    let mut sums: Vec<Vec<f64>> = first
        .tensors
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    for ck in checkpoints {
        if ck.tensors.len() != first.tensors.len() {
            return Err(Error::Checkpoint(
                "checkpoints hold different tensor counts".into(),
            ));
        }
        for ((sum, (name, t)), (name0, t0)) in sums.iter_mut().zip(&ck.tensors).zip(&first.tensors)
        {
            if name != name0 || t.shape() != t0.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` {:?} does not match `{name0}` {:?}",
                    t.shape(),
                    t0.shape()
                )));
            }
            for (s, v) in sum.iter_mut().zip(t.data()) {
                *s += v;
            }
        }
    }
    let k = checkpoints.len() as f64;
    let tensors = sums
        .into_iter()
        .zip(&first.tensors)
        .map(|(sum, (name, t))| {
            let mean = sum.into_iter().map(|s| s / k).collect();
            Ok((name.clone(), Tensor::new(t.shape().to_vec(), mean)?))
        })
        .collect::<Result<_>>()?;
    let mut metadata = BTreeMap::new();
    metadata.insert("averaged".to_string(), checkpoints.len().to_string());
    Ok(Checkpoint { metadata, tensors })
}

/// Averages the last `k` of `paths`, which are taken to be in save order.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P], k: usize) -> Result<Checkpoint> {
    if k == 0 || k > paths.len() {
        return Err(Error::Checkpoint(format!(
            "cannot average the last {k} of {} checkpoints",
            paths.len()
        )));
    }
    let loaded = paths[paths.len() - k..]
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<Vec<_>>>()?;
    average(&loaded)
}
