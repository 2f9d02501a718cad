//! SGD and Adam over a [`ParamStore`], with global-norm gradient clipping.

use std::collections::HashMap;

use super::params::{check_grads_finite, ParamStore};
use super::tape::NumResult;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum OptKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug)]
pub struct Optimizer {
    pub kind: OptKind,
    pub learning_rate: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    step_count: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Optimizer {
            kind: OptKind::Sgd,
            learning_rate,
            grad_clip_norm: Some(DEFAULT_GRAD_CLIP),
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Optimizer {
            kind: OptKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
            grad_clip_norm: Some(DEFAULT_GRAD_CLIP),
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn without_clipping(mut self) -> Self {
        self.grad_clip_norm = None;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, store: &mut ParamStore) -> NumResult<()> {
        check_grads_finite(store)?;
        if let Some(limit) = self.grad_clip_norm {
            let total: f64 = store
                .iter()
                .filter(|p| !p.frozen)
                .map(|p| p.grad.sq_norm())
                .sum::<f64>()
                .sqrt();
            if total > limit {
                let c = limit / total;
                for p in store.iter_mut() {
                    if !p.frozen {
                        p.grad.scale_assign(c);
                    }
                }
            }
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptKind::Sgd => {
                for p in store.iter_mut() {
                    if p.frozen {
                        continue;
                    }
                    for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= lr * g;
                    }
                }
            }
            OptKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step_count as i32);
                let bc2 = 1.0 - beta2.powi(self.step_count as i32);
                for p in store.iter_mut() {
                    if p.frozen {
                        continue;
                    }
                    let (m, v) = self
                        .moments
                        .entry(p.name.clone())
                        .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
                    for i in 0..p.value.len() {
                        let g = p.grad.data()[i];
                        let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                        let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                        m.data_mut()[i] = mi;
                        v.data_mut()[i] = vi;
                        let mhat = mi / bc1;
                        let vhat = vi / bc2;
                        p.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0));
        store.get_mut("p").grad = Tensor::scalar(1.0);
        let mut opt = Optimizer::sgd(0.1).without_clipping();
        opt.step(&mut store).unwrap();
        assert!((store.get("p").value.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // At t = 1 the bias-corrected update is lr * g / (|g| + eps).
        for &g in &[1.0, 100.0, -0.3] {
            let mut store = ParamStore::new();
            store.insert("p", Tensor::scalar(0.0));
            store.get_mut("p").grad = Tensor::scalar(g);
            let mut opt = Optimizer::adam(0.01).without_clipping();
            opt.step(&mut store).unwrap();
            let got = store.get("p").value.item();
            assert!(
                (got + 0.01 * g.signum()).abs() < 1e-6,
                "g = {}, step = {}",
                g,
                got
            );
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.0));
        let mut opt = Optimizer::adam(0.05).without_clipping();
        for _ in 0..200 {
            let p = store.get("p").value.item();
            store.get_mut("p").grad = Tensor::scalar(2.0 * (p - 2.0));
            opt.step(&mut store).unwrap();
        }
        assert!((store.get("p").value.item() - 2.0).abs() < 1e-2);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        store.insert("bad", Tensor::scalar(0.0));
        store.get_mut("bad").grad = Tensor::scalar(f64::NAN);
        let mut opt = Optimizer::sgd(0.1);
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn frozen_parameter_never_moves() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0));
        store.set_frozen("p", true);
        store.get_mut("p").grad = Tensor::scalar(10.0);
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("p").value.item(), 1.0);
    }
}
