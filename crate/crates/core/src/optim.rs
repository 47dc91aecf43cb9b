//! First-order parameter updates shared by the training loops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::ExtraTensor;
use crate::model::params::vecops;
use crate::model::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::Config(format!("invalid adam settings beta1={beta1} beta2={beta2} eps={eps}")));
            }
        }
        Ok(())
    }
}

/// Optimizer with its running state. SGD is stateless.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (params.zeros_like(), params.zeros_like()),
        };
        Self { kind, step: 0, m, v }
    }

    /// `params -= lr · update(grads)`, optionally clipping `grads` to a global
    /// norm first. Returns the pre-clip gradient norm.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &mut [Tensor<f64>], lr: f64, clip: Option<f64>) -> f64 {
        assert_eq!(params.len(), grads.len());
        let norm = match clip {
            Some(c) => vecops::clip_global_norm(grads, c),
            None => vecops::norm(grads),
        };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => vecops::axpy(&mut params.values, -lr, grads),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as f64;
                let c1 = 1.0 - beta1.powf(t);
                let c2 = 1.0 - beta2.powf(t);
                for (((p, g), m), v) in params.values.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
                    for i in 0..p.data.len() {
                        let gi = g.data[i];
                        m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                        v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                        let mh = m.data[i] / c1;
                        let vh = v.data[i] / c2;
                        p.data[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        norm
    }

    /// Serialize running moments for a checkpoint.
    pub fn to_extra(&self, prefix: &str) -> Vec<ExtraTensor> {
        let mut out = vec![ExtraTensor { name: format!("{prefix}.step"), value: Tensor::row_vector(vec![self.step as f64]) }];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push(ExtraTensor { name: format!("{prefix}.m.{i}"), value: m.clone() });
            out.push(ExtraTensor { name: format!("{prefix}.v.{i}"), value: v.clone() });
        }
        out
    }

    pub fn from_extra(kind: OptimizerKind, params: &ParamSet, extra: &[ExtraTensor], prefix: &str) -> Result<Self> {
        let find = |name: String| {
            extra
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.value.clone())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer tensor {name}")))
        };
        let mut opt = Self::new(kind, params);
        opt.step = find(format!("{prefix}.step"))?.data[0] as u64;
        for i in 0..opt.m.len() {
            let (m, v) = (find(format!("{prefix}.m.{i}"))?, find(format!("{prefix}.v.{i}"))?);
            if m.shape() != opt.m[i].shape() || v.shape() != opt.v[i].shape() {
                return Err(Error::Config(format!("optimizer moment {i} has the wrong shape")));
            }
            opt.m[i] = m;
            opt.v[i] = v;
        }
        Ok(opt)
    }
}
