use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..OptimizerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(unit(self.beta1) && unit(self.beta2) && self.eps > 0.0) {
            return Err(Error::invalid("adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// Outer optimizer state. Adam moments are created on the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Option<ParamSet>,
    pub v: Option<ParamSet>,
}

impl OptimState {
    /// Applies one descent step along `grad`. A zero learning rate leaves the
    /// parameters and the state untouched.
    pub fn update(&mut self, params: &ParamSet, grad: &ParamSet, lr: f64, cfg: &OptimizerConfig) -> Result<ParamSet> {
        params.check_compatible(grad)?;
        if lr == 0.0 {
            return Ok(params.clone());
        }
        match cfg.kind {
            OptimizerKind::Sgd => {
                self.step += 1;
                params.zip_map(grad, |p, g| p - lr * g)
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let m = match &self.m {
                    Some(m) => m.zip_map(grad, |m, g| b1 * m + (1.0 - b1) * g)?,
                    None => grad.map(|g| (1.0 - b1) * g),
                };
                let v = match &self.v {
                    Some(v) => v.zip_map(grad, |v, g| b2 * v + (1.0 - b2) * g * g)?,
                    None => grad.map(|g| (1.0 - b2) * g * g),
                };
                self.step += 1;
                let t = self.step as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                let step = m.zip_map(&v, |m, v| lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))?;
                self.m = Some(m);
                self.v = Some(v);
                params.sub(&step)
            }
        }
    }
}
