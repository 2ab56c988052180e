//! Parameter update rules: plain SGD and Adam with bias correction.

use crate::config::OptimizerKind;
use crate::matrix::Matrix;
use crate::params::{GradStore, ParamSet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer with its running state. Adam's moment tensors align with the
/// parameter set by index.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        t: u64,
        m: Vec<Matrix>,
        v: Vec<Matrix>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamSet) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                t: 0,
                m: (0..params.len())
                    .map(|i| {
                        let p = params.value(i);
                        Matrix::zeros(p.rows, p.cols)
                    })
                    .collect(),
                v: (0..params.len())
                    .map(|i| {
                        let p = params.value(i);
                        Matrix::zeros(p.rows, p.cols)
                    })
                    .collect(),
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
            Optimizer::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradStore) {
        match self {
            Optimizer::Sgd { lr } => {
                for i in 0..params.len() {
                    let g = grads.get(i);
                    let p = params.value_mut(i);
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= *lr * gv;
                    }
                }
            }
            Optimizer::Adam { lr, t, m, v } => {
                *t += 1;
                let b1t = 1.0 - ADAM_BETA1.powi(*t as i32);
                let b2t = 1.0 - ADAM_BETA2.powi(*t as i32);
                for i in 0..params.len() {
                    let g = grads.get(i);
                    let mi = m[i].data_mut();
                    let vi = v[i].data_mut();
                    let p = params.value_mut(i);
                    for (((pv, gv), mv), vv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(mi).zip(vi)
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let mhat = *mv / b1t;
                        let vhat = *vv / b2t;
                        *pv -= *lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
