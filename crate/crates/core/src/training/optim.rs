use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Parameter};
use crate::error::{Error, Result};

/// Inverse-square-root schedule with linear warmup:
/// `lr_peak * min(step / warmup, sqrt(warmup / step))`.
pub fn lr_at(step: usize, lr_peak: f64, warmup: usize) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    lr_peak * (s / w).min((w / s).sqrt())
}

/// Which parameters the L2 penalty reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Scope {
    /// Rank-2 tensors: projection matrices and the embedding table.
    #[default]
    Weights,
    /// Every trainable tensor, biases and norm parameters included.
    All,
}

impl L2Scope {
    pub fn includes(self, p: &Parameter) -> bool {
        match self {
            L2Scope::Weights => p.value.rank() == 2,
            L2Scope::All => true,
        }
    }
}

/// `lambda * sum(w^2)` over the parameters in `scope`.
pub fn l2_penalty(store: &ParamStore, lambda: f64, scope: L2Scope) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let sq: f64 = store
        .iter()
        .filter(|(_, p)| scope.includes(p))
        .flat_map(|(_, p)| p.value.data())
        .map(|w| w * w)
        .sum();
    lambda * sq
}

pub fn l2_penalized_loss(ce_loss: f64, store: &ParamStore, lambda: f64, scope: L2Scope) -> f64 {
    ce_loss + l2_penalty(store, lambda, scope)
}

/// Adds the penalty gradient `2 * lambda * w` to the accumulated gradients.
pub fn add_l2_grad(store: &mut ParamStore, lambda: f64, scope: L2Scope) {
    if lambda == 0.0 {
        return;
    }
    for p in store.iter_mut() {
        if scope.includes(p) {
            let values = p.value.data().to_vec();
            for (g, w) in p.grad.data_mut().iter_mut().zip(values) {
                *g += 2.0 * lambda * w;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if store.iter().any(|(_, p)| !p.grad.all_finite()) {
            return Err(Error::Degenerate {
                op: "adam",
                detail: "non-finite gradient".into(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data().to_vec();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_rows(&[vec![w]]).unwrap());
        store
    }

    #[test]
    fn schedule_closed_forms() {
        assert_eq!(lr_at(4000, 1e-3, 4000), 1e-3);
        assert_eq!(lr_at(2000, 1e-3, 4000), 5e-4);
        assert_eq!(lr_at(16000, 1e-3, 4000), 5e-4);
    }

    #[test]
    fn single_weight_penalty() {
        let mut store = scalar_store(3.0);
        assert!((l2_penalized_loss(0.0, &store, 0.02, L2Scope::Weights) - 0.18).abs() < 1e-15);
        assert_eq!(l2_penalized_loss(1.5, &store, 0.0, L2Scope::Weights), 1.5);
        add_l2_grad(&mut store, 0.02, L2Scope::Weights);
        assert!((store.get(crate::ParamId(0)).grad.data()[0] - 0.12).abs() < 1e-15);
    }

    #[test]
    fn scope_skips_vectors() {
        let mut store = scalar_store(1.0);
        store.add("b", Tensor::vector(vec![2.0]));
        assert_eq!(l2_penalty(&store, 1.0, L2Scope::Weights), 1.0);
        assert_eq!(l2_penalty(&store, 1.0, L2Scope::All), 5.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(0.7);
        let mut adam = Adam::new(&store, 0.9, 0.997, 1e-9);
        for _ in 0..3 {
            adam.step(&mut store, 0.1).unwrap();
        }
        assert_eq!(store.get(crate::ParamId(0)).value.data()[0], 0.7);
    }

    #[test]
    fn hand_trace() {
        // gradients 1, -2, 0.5 at lr 0.1; m, v and corrections written out
        let gs = [1.0, -2.0, 0.5];
        let (b1, b2, eps, lr) = (0.9f64, 0.997f64, 1e-8, 0.1);
        let mut want = 0.0;
        let (mut m, mut v) = (0.0, 0.0);
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, b1, b2, eps);
        for (t, g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (t + 1) as i32;
            want -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            store.get_mut(crate::ParamId(0)).grad = Tensor::from_rows(&[vec![*g]]).unwrap();
            adam.step(&mut store, lr).unwrap();
        }
        assert!((store.get(crate::ParamId(0)).value.data()[0] - want).abs() < 1e-15);
        // first step moves by exactly lr in the direction of -g
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, b1, b2, 0.0);
        store.get_mut(crate::ParamId(0)).grad = Tensor::from_rows(&[vec![3.0]]).unwrap();
        adam.step(&mut store, lr).unwrap();
        assert!((store.get(crate::ParamId(0)).value.data()[0] + lr).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_flagged() {
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, 0.9, 0.997, 1e-9);
        store.get_mut(crate::ParamId(0)).grad = Tensor::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(adam.step(&mut store, 0.1).is_err());
        assert_eq!(adam.steps_taken(), 0);
    }
}
