//! First-order optimizers over a [`ParamStore`].

use super::{ParamStore, Result, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Gradient descent with classical momentum.
    Sgd { momentum: f64 },
    /// Adaptive moments with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter state slots, aligned with the store's entry order.
struct Slot<S> {
    m: Vec<S>,
    v: Vec<S>,
}

pub struct Optimizer<S> {
    pub kind: OptimizerKind,
    pub lr: f64,
    steps: u64,
    slots: Vec<Slot<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(TensorError::Invalid {
                op: "optimizer",
                msg: format!("learning rate {lr} must be positive"),
            });
        }
        let valid = match kind {
            OptimizerKind::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if !valid {
            return Err(TensorError::Invalid {
                op: "optimizer",
                msg: "hyperparameters out of range".into(),
            });
        }
        Ok(Optimizer {
            kind,
            lr,
            steps: 0,
            slots: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    fn ensure_slots(&mut self, store: &ParamStore<S>) {
        while self.slots.len() < store.len() {
            let n = store.entries()[self.slots.len()].values.len();
            self.slots.push(Slot {
                m: vec![S::zero(); n],
                v: vec![S::zero(); n],
            });
        }
    }

    /// One update. `grads[i]` pairs with store entry `i`; a `None` gradient
    /// leaves that parameter (and its moments) untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<&[S]>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(TensorError::Invalid {
                op: "optimizer_step",
                msg: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        self.ensure_slots(store);
        self.steps += 1;
        let lr = S::c(self.lr);
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = S::c(momentum);
                for (i, grad) in grads.iter().enumerate() {
                    let Some(g) = grad else { continue };
                    let slot = &mut self.slots[i];
                    let p = store.values_mut(i);
                    for j in 0..p.len() {
                        slot.m[j] = mu * slot.m[j] + g[j];
                        p[j] -= lr * slot.m[j];
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let b1 = S::c(beta1);
                let b2 = S::c(beta2);
                let eps = S::c(eps);
                let one = S::one();
                let t = self.steps as i32;
                let c1 = one - S::c(beta1.powi(t));
                let c2 = one - S::c(beta2.powi(t));
                for (i, grad) in grads.iter().enumerate() {
                    let Some(g) = grad else { continue };
                    let slot = &mut self.slots[i];
                    let p = store.values_mut(i);
                    for j in 0..p.len() {
                        slot.m[j] = b1 * slot.m[j] + (one - b1) * g[j];
                        slot.v[j] = b2 * slot.v[j] + (one - b2) * g[j] * g[j];
                        let mhat = slot.m[j] / c1;
                        let vhat = slot.v[j] / c2;
                        p[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers for checkpointing: (name, values) per parameter, first
    /// moments then second moments, in store order.
    pub fn state(&self, store: &ParamStore<S>) -> Vec<(String, Vec<usize>, Vec<S>)> {
        let mut out = Vec::new();
        for (i, e) in store.entries().iter().enumerate() {
            if i < self.slots.len() {
                out.push((format!("{}.m", e.name), e.shape.clone(), self.slots[i].m.clone()));
                out.push((format!("{}.v", e.name), e.shape.clone(), self.slots[i].v.clone()));
            }
        }
        out
    }

    /// Restore moment buffers captured by [`Optimizer::state`].
    pub fn load_state(&mut self, store: &ParamStore<S>, state: &[(String, Vec<usize>, Vec<S>)]) -> Result<()> {
        self.ensure_slots(store);
        for (name, _, values) in state {
            let (base, kind) = name
                .rsplit_once('.')
                .ok_or_else(|| TensorError::Invalid {
                    op: "optimizer_load",
                    msg: format!("malformed state name {name}"),
                })?;
            let idx = store
                .entries()
                .iter()
                .position(|e| e.name == base)
                .ok_or_else(|| TensorError::Invalid {
                    op: "optimizer_load",
                    msg: format!("state {name} has no matching parameter"),
                })?;
            let slot = &mut self.slots[idx];
            let dst = match kind {
                "m" => &mut slot.m,
                "v" => &mut slot.v,
                other => {
                    return Err(TensorError::Invalid {
                        op: "optimizer_load",
                        msg: format!("unknown moment kind {other}"),
                    })
                }
            };
            if dst.len() != values.len() {
                return Err(TensorError::Invalid {
                    op: "optimizer_load",
                    msg: format!("{name}: length mismatch"),
                });
            }
            dst.copy_from_slice(values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::{Optimizer, OptimizerKind};
    use crate::tensor::params::ParamStore;

    fn store_with(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", &[values.len()], values).unwrap();
        s
    }

    #[test]
    fn sgd_first_step_is_lr_times_grad() {
        let mut store = store_with(vec![1.0, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1).unwrap();
        let g = vec![2.0, -4.0];
        opt.step(&mut store, &[Some(g.as_slice())]).unwrap();
        let p = store.entries()[0].values.clone();
        assert!((p[0] - 0.8).abs() < 1e-15);
        assert!((p[1] - (-0.6)).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut store = store_with(vec![0.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 }, 1.0).unwrap();
        let g = vec![1.0];
        opt.step(&mut store, &[Some(g.as_slice())]).unwrap();
        // v=1, p=-1
        opt.step(&mut store, &[Some(g.as_slice())]).unwrap();
        // v=1.5, p=-2.5
        assert!((store.entries()[0].values[0] - (-2.5)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut store = store_with(vec![5.0, 5.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam_default(), 0.01).unwrap();
        let g = vec![3.0, -0.001];
        opt.step(&mut store, &[Some(g.as_slice())]).unwrap();
        let p = store.entries()[0].values.clone();
        // Bias-corrected first step is ~lr * sign(g) for |g| >> eps.
        assert!((p[0] - (5.0 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (5.0 + 0.01)).abs() < 1e-4);
    }

    #[test]
    fn skipped_grads_leave_params_alone() {
        let mut store = store_with(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam_default(), 0.1).unwrap();
        opt.step(&mut store, &[None]).unwrap();
        assert_eq!(store.entries()[0].values[0], 1.0);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(Optimizer::<f64>::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.0).is_err());
        assert!(Optimizer::<f64>::new(OptimizerKind::Sgd { momentum: 1.0 }, 0.1).is_err());
        assert!(Optimizer::<f64>::new(
            OptimizerKind::Adam { beta1: 0.9, beta2: 1.0, eps: 1e-8 },
            0.1,
        )
        .is_err());
    }

    #[test]
    fn state_round_trips() {
        let mut store = store_with(vec![1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam_default(), 0.01).unwrap();
        let g = vec![0.5, -0.5];
        opt.step(&mut store, &[Some(g.as_slice())]).unwrap();
        let state = opt.state(&store);
        let mut opt2 = Optimizer::new(OptimizerKind::adam_default(), 0.01).unwrap();
        opt2.load_state(&store, &state).unwrap();
        opt2.set_steps(opt.steps());
        let mut store2 = store.clone();
        opt.step(&mut store, &[Some(g.as_slice())]).unwrap();
        opt2.step(&mut store2, &[Some(g.as_slice())]).unwrap();
        assert_eq!(store.entries()[0].values, store2.entries()[0].values);
    }
}
