#![allow(dead_code)]

pub mod cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sharelab::data::{Batch, Example};
use sharelab::{ParamId, ParamStore, Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients near zero are
/// compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

pub struct FdStats {
    /// Largest relative error over the smooth probes.
    pub worst: f64,
    pub checked: usize,
    /// Probes where `±h` straddles a kink (a ReLU switching sign).
    pub skipped: usize,
}

/// Central finite differences against the tape gradient.
///
/// `loss` builds a scalar from the store. `coords` limits how many entries of
/// each parameter are probed (all when `None`). A probe whose step-`h` and
/// step-`h/10` estimates disagree lies within `h` of a non-differentiable
/// point; it is counted in `skipped` instead of being compared.
pub fn fd_check(
    store: &mut ParamStore,
    loss: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
    coords: Option<usize>,
    seed: u64,
) -> FdStats {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store).unwrap();
    store.zero_grad();
    tape.backward(l, store).unwrap();
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let l = loss(&mut tape, store).unwrap();
        tape.value(l).item()
    };
    let central = |store: &mut ParamStore, id: ParamId, i: usize, h: f64| {
        let orig = store.get(id).value.data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + h;
        let plus = eval(store);
        store.get_mut(id).value.data_mut()[i] = orig - h;
        let minus = eval(store);
        store.get_mut(id).value.data_mut()[i] = orig;
        (plus - minus) / (2.0 * h)
    };
    let mut pick = rng(seed ^ 0xfd);
    let mut stats = FdStats {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.numel();
        let idx: Vec<usize> = match coords {
            None => (0..n).collect(),
            Some(k) => (0..k.min(n)).map(|_| pick.random_range(0..n)).collect(),
        };
        for i in idx {
            let numeric = central(store, id, i, FD_STEP);
            let err = rel_error(analytic[id.0][i], numeric);
            if err > FD_REL_TOL
                && rel_error(numeric, central(store, id, i, FD_STEP / 10.0)) > FD_REL_TOL
            {
                stats.skipped += 1;
                continue;
            }
            stats.checked += 1;
            stats.worst = stats.worst.max(err);
        }
    }
    stats
}

/// `sum(out * w)` for a fixed random `w`, turning any output into a scalar
/// with a non-trivial gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = random_tensor(&mut rng(seed), &shape, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

pub fn reverse_examples(seqs: &[Vec<usize>]) -> Vec<Example> {
    seqs.iter()
        .map(|s| Example {
            src: s.clone(),
            tgt: s.iter().rev().copied().collect(),
        })
        .collect()
}

pub fn small_batch(seed: u64, vocab: usize) -> Batch {
    let mut r = rng(seed);
    let seqs: Vec<Vec<usize>> = (0..3)
        .map(|_| {
            let len = r.random_range(2..6);
            (0..len).map(|_| r.random_range(4..vocab)).collect()
        })
        .collect();
    let examples = reverse_examples(&seqs);
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::from_examples(&refs, (0..refs.len()).collect()).unwrap()
}
