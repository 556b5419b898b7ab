//! Parameter-space optimizers keyed by canonical parameter name, so state
//! survives checkpointing and the update never depends on traversal order.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdaptiveMoment,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Slot {
    pub m: Option<ArrayD<f32>>,
    pub v: Option<ArrayD<f32>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub momentum: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub(crate) step_count: u64,
    pub(crate) slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f32, momentum: f32, beta1: f32, beta2: f32) -> Self {
        Optimizer {
            kind,
            learning_rate,
            momentum,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn set_step_count(&mut self, t: u64) {
        self.step_count = t;
    }

    pub(crate) fn slots(&self) -> impl Iterator<Item = (&String, &Slot)> {
        self.slots.iter()
    }

    pub(crate) fn slot_mut(&mut self, name: &str) -> &mut Slot {
        self.slots.entry(name.to_string()).or_default()
    }

    /// Apply one update. Gradients are keyed by parameter name; parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f32>>) {
        self.step_count += 1;
        for (name, g) in grads {
            let Some(entry) = store.get_mut(name) else {
                continue;
            };
            if !entry.trainable {
                continue;
            }
            let slot = self.slots.entry(name.clone()).or_default();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let m = slot
                        .m
                        .get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    m.zip_mut_with(g, |mv, &gv| *mv = self.momentum * *mv + gv);
                    entry
                        .value
                        .zip_mut_with(m, |p, &mv| *p -= self.learning_rate * mv);
                }
                OptimizerKind::AdaptiveMoment => {
                    let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
                    let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
                    let m = slot
                        .m
                        .get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    m.zip_mut_with(g, |mv, &gv| {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv
                    });
                    let v = slot
                        .v
                        .get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    v.zip_mut_with(g, |vv, &gv| {
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv
                    });
                    let lr = self.learning_rate;
                    let eps = self.eps;
                    ndarray::Zip::from(&mut entry.value)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|p, &mv, &vv| {
                            let mhat = mv / bc1;
                            let vhat = vv / bc2;
                            *p -= lr * mhat / (vhat.sqrt() + eps);
                        });
                }
            }
        }
    }
}
