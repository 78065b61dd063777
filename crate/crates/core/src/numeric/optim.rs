//! Adaptive first-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::{Bound, ParamStore};
use super::tape::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Second moment tracks (g − m)² instead of g².
    AdaBelief,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Option<Array>>,
    second: Vec<Option<Array>>,
    step: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(bound[id]) else { continue };
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| Array::zeros(g.shape()));
            let v = self.second[i].get_or_insert_with(|| Array::zeros(g.shape()));
            let p = store.get_mut(id);
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = c.beta1 * md[j] + (1.0 - c.beta1) * gj;
                let second = match c.kind {
                    OptimizerKind::Adam => gj * gj,
                    OptimizerKind::AdaBelief => (gj - md[j]) * (gj - md[j]) + c.eps,
                };
                vd[j] = c.beta2 * vd[j] + (1.0 - c.beta2) * second;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
